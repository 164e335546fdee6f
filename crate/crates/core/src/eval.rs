//! Image metrics, the trajectory protocol, rigid alignment and geometry metrics.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, SVD, Vector3};
use serde::{Deserialize, Serialize};

use crate::data::{SdfField, Trajectory};
use crate::error::{invalid, shape_err, Error, Result};
use crate::losses::Proxies;
use crate::rendering::{norm3, CameraPose, Vec3};
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

pub fn mae(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// Peak signal-to-noise ratio for unit-range images, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m <= 0.0 { PSNR_CAP } else { (-10.0 * m.log10()).min(PSNR_CAP) })
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Err(invalid!("empty images"));
    }
    Ok(())
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over channels with an 11x11 Gaussian window (sigma 1.5) on valid positions.
///
/// Images smaller than the window use the largest odd window that fits.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    if a.ndim() != 3 {
        return Err(shape_err!("ssim expects [C, H, W], got {:?}", a.shape()));
    }
    let (c, h, w) = (a.dim(0), a.dim(1), a.dim(2));
    let mut size = 11.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let win = gaussian_window(size, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (ho, wo) = (h - size + 1, w - size + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (di, wi) in win.iter().enumerate() {
                    for (dj, wj) in win.iter().enumerate() {
                        let k = (i + di) * w + j + dj;
                        let wt = wi * wj;
                        let (x, y) = (pa[k], pb[k]);
                        ma += wt * x;
                        mb += wt * y;
                        saa += wt * x * x;
                        sbb += wt * y * y;
                        sab += wt * x * y;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (c * ho * wo) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Source,
    Novel,
}

impl ViewKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViewKind::Source => "source",
            ViewKind::Novel => "novel",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sequence: usize,
    pub frame: usize,
    pub view: ViewKind,
    pub mae: f64,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub similarity: f64,
}

pub fn compute_2d_metrics(pred: &Tensor, target: &Tensor, proxies: &Proxies) -> Result<MetricRow> {
    Ok(MetricRow {
        sequence: 0,
        frame: 0,
        view: ViewKind::Source,
        mae: mae(pred, target)?,
        mse: mse(pred, target)?,
        psnr: psnr(pred, target)?,
        ssim: ssim(pred, target)?,
        perceptual: proxies.perceptual_distance(pred, target),
        similarity: proxies.similarity(pred, target),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() {
        return Summary { mean: 0.0, std: 0.0 };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Summary { mean, std: var.sqrt() }
}

pub const METRIC_NAMES: [&str; 6] = ["mae", "mse", "psnr", "ssim", "perceptual", "similarity"];

impl MetricRow {
    pub fn values(&self) -> [f64; 6] {
        [self.mae, self.mse, self.psnr, self.ssim, self.perceptual, self.similarity]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn partition(&self, view: ViewKind) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(move |r| r.view == view)
    }

    /// Mean and std of every metric for one partition.
    pub fn aggregate(&self, view: ViewKind) -> Vec<(&'static str, Summary)> {
        let rows: Vec<&MetricRow> = self.partition(view).collect();
        METRIC_NAMES
            .iter()
            .enumerate()
            .map(|(k, name)| (*name, summarize(&rows.iter().map(|r| r.values()[k]).collect::<Vec<_>>())))
            .collect()
    }

    pub fn mean(&self, view: ViewKind, metric: &str) -> Option<f64> {
        self.aggregate(view).into_iter().find(|(n, _)| *n == metric).map(|(_, s)| s.mean)
    }

    pub fn rows_csv(&self) -> String {
        let mut s = String::from("model,sequence,frame,view,mae,mse,psnr,ssim,perceptual,similarity\n");
        for r in &self.rows {
            let _ = write!(s, "{},{},{},{}", self.model, r.sequence, r.frame, r.view.as_str());
            for v in r.values() {
                let _ = write!(s, ",{v:.8}");
            }
            s.push('\n');
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("model,view,metric,mean,std\n");
        for view in [ViewKind::Source, ViewKind::Novel] {
            if self.partition(view).next().is_none() {
                continue;
            }
            for (name, sm) in self.aggregate(view) {
                let _ = writeln!(s, "{},{},{name},{:.8},{:.8}", self.model, view.as_str(), sm.mean, sm.std);
            }
        }
        s
    }

    pub fn write_csv(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}_rows.csv")), self.rows_csv())?;
        std::fs::write(dir.join(format!("{stem}_summary.csv")), self.summary_csv())?;
        Ok(())
    }
}

/// Anything that can reconstruct views of the object in a source image.
pub trait InversionModel {
    fn name(&self) -> &str;
    /// High-resolution renders at every target pose.
    fn reconstruct(&self, source: &Tensor, source_pose: &CameraPose, targets: &[CameraPose]) -> Result<Vec<Tensor>>;
}


/// Returns the ground-truth frames; the error floor of the protocol.
pub struct OracleModel {
    by_sequence: HashMap<usize, Trajectory>,
}

impl OracleModel {
    pub fn new(trajectories: &[Trajectory]) -> Self {
        Self { by_sequence: trajectories.iter().cloned().enumerate().collect() }
    }
}

impl InversionModel for OracleModel {
    fn name(&self) -> &str {
        "oracle"
    }

    fn reconstruct(&self, source: &Tensor, _pose: &CameraPose, targets: &[CameraPose]) -> Result<Vec<Tensor>> {
        let t = self
            .by_sequence
            .values()
            .find(|t| t.frames_hi.iter().any(|f| f == source))
            .ok_or_else(|| Error::State("source frame not found in any sequence".into()))?;
        targets
            .iter()
            .map(|p| {
                t.poses
                    .iter()
                    .position(|q| q == p)
                    .map(|i| t.frames_hi[i].clone())
                    .ok_or_else(|| Error::State("target pose not in sequence".into()))
            })
            .collect()
    }
}

/// Invert frame `source_frame(i)` of each sequence and score every other frame.
pub fn evaluate_trajectory(
    model: &dyn InversionModel,
    trajectories: &[Trajectory],
    source_frame: &dyn Fn(usize, usize) -> usize,
    proxies: &Proxies,
) -> Result<MetricReport> {
    if trajectories.is_empty() {
        return Err(Error::Precondition("no trajectory sequences to evaluate".into()));
    }
    let mut rows = Vec::new();
    for (si, t) in trajectories.iter().enumerate() {
        let n = t.poses.len();
        let src = source_frame(si, n);
        if src >= n {
            return Err(invalid!("source frame {src} outside sequence of {n}"));
        }
        let recon = model.reconstruct(&t.frames_hi[src], &t.poses[src], &t.poses)?;
        for (fi, (pred, target)) in recon.iter().zip(&t.frames_hi).enumerate() {
            let mut row = compute_2d_metrics(pred, target, proxies)?;
            row.sequence = si;
            row.frame = fi;
            row.view = if fi == src { ViewKind::Source } else { ViewKind::Novel };
            rows.push(row);
        }
    }
    Ok(MetricReport { model: model.name().to_string(), rows })
}

/// Similarity transform `x -> scale * R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
    pub scale: f64,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3], scale: 1.0 }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        std::array::from_fn(|i| self.scale * (r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]) + self.translation[i])
    }

    pub fn determinant(&self) -> f64 {
        to_matrix(&self.rotation).determinant()
    }
}

fn to_matrix(r: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| r[i][j])
}

/// Least-squares rotation (and optionally scale) mapping `pred` onto `gt`.
pub fn rigid_align(pred: &[Vec3], gt: &[Vec3], with_scale: bool) -> Result<RigidTransform> {
    if pred.len() != gt.len() {
        return Err(shape_err!("{} predicted vs {} reference keypoints", pred.len(), gt.len()));
    }
    if pred.len() < 3 {
        return Err(Error::Degenerate("rigid alignment needs at least 3 correspondences".into()));
    }
    let n = pred.len() as f64;
    let v = |p: &Vec3| Vector3::new(p[0], p[1], p[2]);
    let cp = pred.iter().map(v).sum::<Vector3<f64>>() / n;
    let cg = gt.iter().map(v).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    let mut var_p = 0.0;
    for (p, q) in pred.iter().zip(gt) {
        let a = v(p) - cp;
        let b = v(q) - cg;
        cov += b * a.transpose();
        spread += a * a.transpose();
        var_p += a.norm_squared();
    }
    for set in [&spread] {
        let sv = set.symmetric_eigenvalues();
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        if s[0] <= 1e-18 || s[1] <= 1e-10 * s[0] {
            return Err(Error::Degenerate("keypoints are coincident or collinear".into()));
        }
    }
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let d = (u * vt).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, if d == 0.0 { 1.0 } else { d }));
    let r = u * fix * vt;
    let scale = if with_scale {
        let sig = svd.singular_values;
        (sig[0] + sig[1] + fix[(2, 2)] * sig[2]) / var_p
    } else {
        1.0
    };
    let t = cg - scale * r * cp;
    Ok(RigidTransform {
        rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
        translation: [t[0], t[1], t[2]],
        scale,
    })
}

/// Root-mean-square keypoint residual after applying `tf`.
pub fn alignment_residual(tf: &RigidTransform, pred: &[Vec3], gt: &[Vec3]) -> f64 {
    let s: f64 = pred.iter().zip(gt).map(|(p, q)| norm3(crate::rendering::sub3(tf.apply(*p), *q)).powi(2)).sum();
    (s / pred.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub median: f64,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn distance_stats(d: &[f64]) -> DistanceStats {
    let mut s = d.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    let median = if n == 0 {
        0.0
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    };
    let sm = summarize(d);
    DistanceStats { median, mean: sm.mean, std: sm.std, count: n }
}

/// For every reference point, the distance to the nearest predicted point.
pub fn point_to_surface_distance(pred: &[Vec3], gt: &[Vec3]) -> Result<Vec<f64>> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Precondition("distance needs non-empty point sets".into()));
    }
    let grid = PointGrid::new(pred);
    Ok(gt.iter().map(|q| grid.nearest(*q)).collect())
}

/// Uniform hash grid for nearest-neighbour queries.
struct PointGrid<'a> {
    points: &'a [Vec3],
    lo: Vec3,
    cell: f64,
    dims: [usize; 3],
    cells: HashMap<[usize; 3], Vec<usize>>,
}

impl<'a> PointGrid<'a> {
    fn new(points: &'a [Vec3]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max).max(1e-9);
        let per_axis = (points.len() as f64).cbrt().ceil().max(1.0);
        let cell = extent / per_axis;
        let dims = std::array::from_fn(|k| (((hi[k] - lo[k]) / cell).floor() as usize) + 1);
        let mut cells: HashMap<[usize; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(lo, cell, dims, *p)).or_default().push(i);
        }
        Self { points, lo, cell, dims, cells }
    }

    fn key(lo: Vec3, cell: f64, dims: [usize; 3], p: Vec3) -> [usize; 3] {
        std::array::from_fn(|k| (((p[k] - lo[k]) / cell).floor().max(0.0) as usize).min(dims[k] - 1))
    }

    fn nearest(&self, q: Vec3) -> f64 {
        // clamping keeps the ring bound valid for queries outside the grid
        let c = Self::key(self.lo, self.cell, self.dims, q).map(|v| v as isize);
        let max_ring = *self.dims.iter().max().expect("3 dims") as isize;
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let k = [c[0] + dx, c[1] + dy, c[2] + dz];
                        if k.iter().zip(&self.dims).any(|(v, d)| *v < 0 || *v >= *d as isize) {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&[k[0] as usize, k[1] as usize, k[2] as usize]) {
                            for &i in ids {
                                best = best.min(norm3(crate::rendering::sub3(self.points[i], q)));
                            }
                        }
                    }
                }
            }
            // unvisited cells are at least `ring * cell` away
            if best <= ring as f64 * self.cell {
                break;
            }
        }
        best
    }
}

/// `n` near-uniform points on a sphere of radius `r`.
pub fn fibonacci_sphere(n: usize, r: f64) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let rad = (1.0 - y * y).sqrt();
            let th = golden * i as f64;
            [r * rad * th.cos(), r * y, r * rad * th.sin()]
        })
        .collect()
}

/// Fixed directions whose first surface crossings serve as keypoints.
pub fn keypoint_directions() -> [Vec3; 7] {
    let n = |v: Vec3| {
        let l = norm3(v);
        [v[0] / l, v[1] / l, v[2] / l]
    };
    [
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        n([1.0, 1.0, 1.0]),
        n([-0.6, 0.3, 0.75]),
    ]
}

/// First outward zero crossing of the field along rays from the origin.
///
/// Rays without a crossing inside `max_radius` return the point at `max_radius`.
pub fn radial_surface(field: &dyn SdfField, dirs: &[Vec3], max_radius: f64) -> Result<Vec<Vec3>> {
    let steps = 64;
    let mut t_lo = vec![0.0; dirs.len()];
    let mut t_hi = vec![max_radius; dirs.len()];
    let mut found = vec![false; dirs.len()];
    let mut prev = field.sdf(&vec![[0.0; 3]; dirs.len()])?;
    for s in 1..=steps {
        let t = max_radius * s as f64 / steps as f64;
        let pts: Vec<Vec3> = dirs.iter().map(|d| [d[0] * t, d[1] * t, d[2] * t]).collect();
        let cur = field.sdf(&pts)?;
        for i in 0..dirs.len() {
            if !found[i] && prev[i] < 0.0 && cur[i] >= 0.0 {
                found[i] = true;
                t_lo[i] = t - max_radius / steps as f64;
                t_hi[i] = t;
            }
        }
        prev = cur;
    }
    for _ in 0..40 {
        let mid: Vec<f64> = t_lo.iter().zip(&t_hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let pts: Vec<Vec3> = dirs.iter().zip(&mid).map(|(d, t)| [d[0] * t, d[1] * t, d[2] * t]).collect();
        let v = field.sdf(&pts)?;
        for i in 0..dirs.len() {
            if !found[i] {
                continue;
            }
            if v[i] < 0.0 {
                t_lo[i] = mid[i];
            } else {
                t_hi[i] = mid[i];
            }
        }
    }
    Ok(dirs
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let t = if found[i] { 0.5 * (t_lo[i] + t_hi[i]) } else { max_radius };
            [d[0] * t, d[1] * t, d[2] * t]
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub identity: usize,
    pub stats: DistanceStats,
    pub keypoint_residual: f64,
}

/// Keypoint-anchored alignment of a predicted surface onto the reference
/// surface followed by reference-to-prediction nearest-point distances.
pub fn evaluate_geometry(identity: usize, pred: &dyn SdfField, gt: &dyn SdfField, n_points: usize, max_radius: f64, with_scale: bool) -> Result<GeometryReport> {
    let kd = keypoint_directions();
    let kp = radial_surface(pred, &kd, max_radius)?;
    let kg = radial_surface(gt, &kd, max_radius)?;
    let tf = rigid_align(&kp, &kg, with_scale)?;
    let dirs = fibonacci_sphere(n_points, 1.0);
    let sp: Vec<Vec3> = radial_surface(pred, &dirs, max_radius)?.into_iter().map(|p| tf.apply(p)).collect();
    let sg = radial_surface(gt, &dirs, max_radius)?;
    let d = point_to_surface_distance(&sp, &sg)?;
    Ok(GeometryReport { identity, stats: distance_stats(&d), keypoint_residual: alignment_residual(&tf, &kp, &kg) })
}

pub fn geometry_csv(reports: &[GeometryReport]) -> String {
    let mut s = String::from("identity,median,mean,std,count,keypoint_residual\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{:.8},{:.8},{:.8},{},{:.8}",
            r.identity, r.stats.median, r.stats.mean, r.stats.std, r.stats.count, r.keypoint_residual
        );
    }
    s
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

/// Zero level set of a field over `[-h, h]³` sampled on `res³` cells,
/// triangulated by marching tetrahedra (six tetrahedra per cell, vertices
/// shared along grid edges so the mesh is closed wherever the surface is).
pub fn extract_mesh(field: &dyn SdfField, res: usize, half_extent: f64) -> Result<Mesh> {
    if res == 0 {
        return Err(invalid!("grid resolution must be positive"));
    }
    let n = res + 1;
    let step = 2.0 * half_extent / res as f64;
    let pos = |i: usize, j: usize, k: usize| [-half_extent + i as f64 * step, -half_extent + j as f64 * step, -half_extent + k as f64 * step];
    let mut grid_pts = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                grid_pts.push(pos(i, j, k));
            }
        }
    }
    let values = field.sdf(&grid_pts)?;
    let id = |i: usize, j: usize, k: usize| (i * n + j) * n + k;
    let mut mesh = Mesh::default();
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();
    let mut vertex_on = |a: usize, b: usize, mesh: &mut Mesh| -> usize {
        let key = (a.min(b), a.max(b));
        *edge_vertex.entry(key).or_insert_with(|| {
            let (va, vb) = (values[a], values[b]);
            let t = if va == vb { 0.5 } else { va / (va - vb) };
            let (pa, pb) = (grid_pts[a], grid_pts[b]);
            mesh.vertices.push(std::array::from_fn(|c| pa[c] + t * (pb[c] - pa[c])));
            mesh.vertices.len() - 1
        })
    };
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    for i in 0..res {
        for j in 0..res {
            for k in 0..res {
                let corner = |bits: [usize; 3]| id(i + bits[0], j + bits[1], k + bits[2]);
                for p in PERMS {
                    let mut b = [0usize; 3];
                    let mut tet = [corner(b); 4];
                    for (s, axis) in p.iter().enumerate() {
                        b[*axis] = 1;
                        tet[s + 1] = corner(b);
                    }
                    let inside: Vec<usize> = tet.iter().copied().filter(|&v| values[v] < 0.0).collect();
                    let outside: Vec<usize> = tet.iter().copied().filter(|&v| values[v] >= 0.0).collect();
                    let mut tris: Vec<[usize; 3]> = Vec::new();
                    match inside.len() {
                        1 => tris.push([
                            vertex_on(inside[0], outside[0], &mut mesh),
                            vertex_on(inside[0], outside[1], &mut mesh),
                            vertex_on(inside[0], outside[2], &mut mesh),
                        ]),
                        3 => tris.push([
                            vertex_on(outside[0], inside[0], &mut mesh),
                            vertex_on(outside[0], inside[1], &mut mesh),
                            vertex_on(outside[0], inside[2], &mut mesh),
                        ]),
                        2 => {
                            let q = [
                                vertex_on(inside[0], outside[0], &mut mesh),
                                vertex_on(inside[0], outside[1], &mut mesh),
                                vertex_on(inside[1], outside[1], &mut mesh),
                                vertex_on(inside[1], outside[0], &mut mesh),
                            ];
                            tris.push([q[0], q[1], q[2]]);
                            tris.push([q[0], q[2], q[3]]);
                        }
                        _ => {}
                    }
                    // orient every triangle so its normal points from inside to outside
                    let ci = centroid(&inside.iter().map(|&v| grid_pts[v]).collect::<Vec<_>>());
                    let co = centroid(&outside.iter().map(|&v| grid_pts[v]).collect::<Vec<_>>());
                    for t in tris {
                        let [a, b, c] = t.map(|v| mesh.vertices[v]);
                        let nrm = crate::rendering::cross(crate::rendering::sub3(b, a), crate::rendering::sub3(c, a));
                        let dir = crate::rendering::sub3(co, ci);
                        if crate::rendering::dot(nrm, dir) < 0.0 {
                            mesh.triangles.push([t[0], t[2], t[1]]);
                        } else {
                            mesh.triangles.push(t);
                        }
                    }
                }
            }
        }
    }
    mesh.triangles.retain(|t| t[0] != t[1] && t[1] != t[2] && t[0] != t[2]);
    Ok(mesh)
}

fn centroid(points: &[Vec3]) -> Vec3 {
    let n = points.len().max(1) as f64;
    std::array::from_fn(|k| points.iter().map(|p| p[k]).sum::<f64>() / n)
}

impl Mesh {
    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {:.8} {:.8} {:.8}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    pub fn from_obj(text: &str) -> Result<Self> {
        let mut m = Mesh::default();
        for (ln, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it.map(|x| x.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| invalid!("line {}: {e}", ln + 1))?;
                    if c.len() != 3 {
                        return Err(invalid!("line {}: vertex needs 3 coordinates", ln + 1));
                    }
                    m.vertices.push([c[0], c[1], c[2]]);
                }
                Some("f") => {
                    let c: Vec<usize> = it
                        .map(|x| x.split('/').next().unwrap_or("").parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| invalid!("line {}: {e}", ln + 1))?;
                    if c.len() != 3 || c.iter().any(|&i| i == 0 || i > m.vertices.len()) {
                        return Err(invalid!("line {}: bad face", ln + 1));
                    }
                    m.triangles.push([c[0] - 1, c[1] - 1, c[2] - 1]);
                }
                _ => {}
            }
        }
        Ok(m)
    }
}
