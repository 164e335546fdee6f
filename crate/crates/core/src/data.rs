//! Self-generated 2D-3D training pairs: poses, surface and free-space point
//! sets, their signed distances and normals, visibility, and on-disk caches.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::generator::{Generator, LatentCode};
use crate::rendering::{
    composite_weights, generate_rays, norm3, project_to_image, sub3, CameraPose, RayBundle, Sampling, SceneBounds,
    Vec3, BACKGROUND_WEIGHT,
};
use crate::tensor::Tensor;

pub const CACHE_VERSION: u32 = 1;
const MAX_ELEVATION: f64 = 1.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseDistribution {
    /// `(azimuth, elevation)` in radians.
    pub mean: [f64; 2],
    pub std: [f64; 2],
    /// Curriculum weight scaling `std`, in `[0, 1]`.
    pub curriculum: f64,
}

impl Default for PoseDistribution {
    fn default() -> Self {
        Self { mean: [0.0, 0.0], std: [0.3, 0.15], curriculum: 1.0 }
    }
}

impl PoseDistribution {
    pub fn with_curriculum(&self, c: f64) -> Self {
        Self { curriculum: c, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.curriculum) {
            return Err(invalid!("curriculum weight {} outside [0, 1]", self.curriculum));
        }
        if self.std.iter().any(|s| !(*s >= 0.0)) {
            return Err(invalid!("pose std must be non-negative"));
        }
        Ok(())
    }

    /// Gaussian around the mean with std scaled by the curriculum weight; elevation is clamped.
    pub fn sample(&self, rng: &mut impl Rng, fov: f64, radius: f64) -> Result<CameraPose> {
        self.validate()?;
        let mut angle = |k: usize| {
            let s = self.curriculum * self.std[k];
            if s == 0.0 {
                self.mean[k]
            } else {
                Normal::new(self.mean[k], s).expect("finite std").sample(rng)
            }
        };
        let az = angle(0);
        let el = angle(1).clamp(-MAX_ELEVATION, MAX_ELEVATION);
        CameraPose::new(az, el, fov, radius)
    }
}

pub fn sample_pose(dist: &PoseDistribution, seed: u64, fov: f64, radius: f64) -> Result<CameraPose> {
    dist.sample(&mut ChaCha8Rng::seed_from_u64(seed), fov, radius)
}

/// A signed distance field that can also report its gradient.
pub trait SdfField {
    fn sdf(&self, x: &[Vec3]) -> Result<Vec<f64>>;
    /// Unit normals plus a flag marking points with a usable (non-zero) gradient.
    fn normals(&self, x: &[Vec3]) -> Result<(Vec<Vec3>, Vec<bool>)>;
    fn alpha(&self) -> f64;
}

/// `|x - c| - radius`; the reference field for analytic checks.
#[derive(Clone, Copy, Debug)]
pub struct AnalyticSphere {
    pub center: Vec3,
    pub radius: f64,
    pub alpha: f64,
}

impl SdfField for AnalyticSphere {
    fn sdf(&self, x: &[Vec3]) -> Result<Vec<f64>> {
        Ok(x.iter().map(|p| norm3(sub3(*p, self.center)) - self.radius).collect())
    }

    fn normals(&self, x: &[Vec3]) -> Result<(Vec<Vec3>, Vec<bool>)> {
        Ok(x.iter()
            .map(|p| {
                let d = sub3(*p, self.center);
                let n = norm3(d);
                if n > 0.0 {
                    ([d[0] / n, d[1] / n, d[2] / n], true)
                } else {
                    ([0.0; 3], false)
                }
            })
            .unzip())
    }

    fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// The generator's geometry for one latent.
pub struct GeneratorField<'a> {
    pub generator: &'a Generator,
    pub latent: &'a LatentCode,
}

impl SdfField for GeneratorField<'_> {
    fn sdf(&self, x: &[Vec3]) -> Result<Vec<f64>> {
        self.generator.sdf_values(self.latent, x)
    }

    fn normals(&self, x: &[Vec3]) -> Result<(Vec<Vec3>, Vec<bool>)> {
        self.generator.check_code(self.latent)?;
        let mut out = Vec::with_capacity(x.len());
        let mut ok = Vec::with_capacity(x.len());
        for chunk in x.chunks(4096) {
            let mut g = Graph::new();
            let codes = g.constant(self.latent.codes.clone());
            let (_, n, norms) = self.generator.sdf_and_normals(&mut g, codes, chunk);
            let nv = g.value(n).data();
            for (i, gn) in norms.iter().enumerate() {
                out.push([nv[3 * i], nv[3 * i + 1], nv[3 * i + 2]]);
                ok.push(*gn > 1e-8);
            }
        }
        Ok((out, ok))
    }

    fn alpha(&self) -> f64 {
        self.generator.alpha()
    }
}

/// Per-pixel surface depth of a field seen from a pose.
#[derive(Clone, Debug)]
pub struct DepthMap {
    pub res: usize,
    /// Expected termination depth normalized by the accumulated weight; 0 on background.
    pub depth: Vec<f64>,
    /// Raw `sum_i w_i t_i`.
    pub raw_depth: Vec<f64>,
    pub weight_sum: Vec<f64>,
    pub rays: RayBundle,
}

impl DepthMap {
    pub fn is_hit(&self, pixel: usize) -> bool {
        self.weight_sum[pixel] >= BACKGROUND_WEIGHT
    }

    pub fn from_weights(rays: RayBundle, weights: &[f64]) -> Self {
        let n = rays.n_samples;
        let t = rays.sample_depths.data();
        let r = rays.n_rays();
        let mut depth = vec![0.0; r];
        let mut raw = vec![0.0; r];
        let mut ws = vec![0.0; r];
        for ray in 0..r {
            let w = &weights[ray * n..(ray + 1) * n];
            let s: f64 = w.iter().sum();
            let d: f64 = w.iter().zip(&t[ray * n..(ray + 1) * n]).map(|(a, b)| a * b).sum();
            ws[ray] = s;
            raw[ray] = d;
            if s >= BACKGROUND_WEIGHT {
                depth[ray] = d / s;
            }
        }
        Self { res: rays.height, depth, raw_depth: raw, weight_sum: ws, rays }
    }
}

/// Volume-render the depth of any field.
pub fn trace_depth(field: &dyn SdfField, pose: &CameraPose, res: usize, n_samples: usize, bounds: SceneBounds) -> Result<DepthMap> {
    let rays = generate_rays(pose, (res, res), n_samples, bounds, Sampling::Midpoint)?;
    let sdf = field.sdf(&rays.points())?;
    let sigma = crate::rendering::sdf_to_density(&sdf, field.alpha())?;
    let (w, _) = composite_weights(&sigma, rays.deltas().data(), n_samples);
    Ok(DepthMap::from_weights(rays, &w))
}

#[derive(Clone, Debug)]
pub struct SurfacePoints {
    pub points: Vec<Vec3>,
    /// Pixel index of each point.
    pub pixels: Vec<usize>,
    pub dropped: usize,
}

/// Accumulated opacity a ray needs before it contributes a surface point;
/// fainter silhouette rays only graze the surface.
pub const SURFACE_OPACITY: f64 = 0.5;

/// One point per opaque ray at its expected termination depth.
pub fn extract_surface_points(depth: &DepthMap) -> SurfacePoints {
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for r in 0..depth.rays.n_rays() {
        if depth.weight_sum[r] >= SURFACE_OPACITY {
            let (o, d) = (depth.rays.origins[r], depth.rays.directions[r]);
            let t = depth.depth[r];
            points.push([o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]);
            pixels.push(r);
        }
    }
    let dropped = depth.rays.n_rays() - points.len();
    SurfacePoints { points, pixels, dropped }
}

/// Number of near-surface and uniform free points for `n_pixels = B*H*W`.
pub fn free_point_counts(n_pixels: usize) -> (usize, usize) {
    (n_pixels, n_pixels / 2)
}

/// Gaussian-perturbed copies of the surface points (std `r/4`, cycled to
/// `n_pixels` points) followed by `n_pixels/2` uniform points in `[-r, r]³`.
pub fn sample_free_points(on: &[Vec3], scene_radius: f64, n_pixels: usize, rng: &mut impl Rng) -> Result<Vec<Vec3>> {
    if on.is_empty() {
        return Err(Error::Precondition("no surface points to perturb".into()));
    }
    if !(scene_radius >= 0.0) {
        return Err(invalid!("scene radius must be non-negative"));
    }
    let (n_near, n_uniform) = free_point_counts(n_pixels);
    let mut out = Vec::with_capacity(n_near + n_uniform);
    let std = scene_radius / 4.0;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for i in 0..n_near {
        let p = on[i % on.len()];
        out.push(std::array::from_fn(|k| p[k] + std * normal.sample(rng)));
    }
    for _ in 0..n_uniform {
        out.push(std::array::from_fn(|_| if scene_radius > 0.0 { rng.random_range(-scene_radius..=scene_radius) } else { 0.0 }));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeDescriptor {
    pub points_on: Vec<Vec3>,
    pub points_free: Vec<Vec3>,
    pub sdf_free: Vec<f64>,
    pub normals_on: Vec<Vec3>,
    pub normal_valid: Vec<bool>,
}

impl ShapeDescriptor {
    /// Target distance of every surface point.
    pub fn sdf_on(&self) -> Vec<f64> {
        vec![0.0; self.points_on.len()]
    }

    pub fn retain(&mut self, on: &[bool], free: &[bool]) {
        let keep = |v: &mut Vec<Vec3>, m: &[bool]| {
            let mut it = m.iter();
            v.retain(|_| *it.next().unwrap_or(&false));
        };
        let mut it = on.iter();
        let mut valid = Vec::new();
        let mut normals = Vec::new();
        for (n, ok) in self.normals_on.iter().zip(&self.normal_valid) {
            if *it.next().unwrap_or(&false) {
                normals.push(*n);
                valid.push(*ok);
            }
        }
        self.normals_on = normals;
        self.normal_valid = valid;
        keep(&mut self.points_on, on);
        let mut it = free.iter();
        let mut sdf = Vec::new();
        for s in &self.sdf_free {
            if *it.next().unwrap_or(&false) {
                sdf.push(*s);
            }
        }
        self.sdf_free = sdf;
        keep(&mut self.points_free, free);
    }
}

pub fn compute_descriptor(field: &dyn SdfField, on: Vec<Vec3>, free: Vec<Vec3>) -> Result<ShapeDescriptor> {
    if on.iter().chain(&free).flatten().any(|c| !c.is_finite()) {
        return Err(invalid!("descriptor points must be finite"));
    }
    let sdf_free = field.sdf(&free)?;
    let (normals_on, normal_valid) = field.normals(&on)?;
    Ok(ShapeDescriptor { points_on: on, points_free: free, sdf_free, normals_on, normal_valid })
}

/// A point is visible when it is no farther from the camera than the surface
/// seen through its (nearest) pixel, plus `tolerance`. Points over background
/// pixels are visible, points outside the image are not.
pub fn filter_visible(points: &[Vec3], pose: &CameraPose, depth: &DepthMap, tolerance: f64) -> Vec<bool> {
    let res = depth.res;
    let pr = project_to_image(points, pose, (res, res));
    let o = pose.position();
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if !pr.valid[i] {
                return false;
            }
            let [u, v] = pr.uv[i];
            if !(-1.0..1.0).contains(&u) || !(-1.0..1.0).contains(&v) {
                return false;
            }
            let j = (((u + 1.0) * res as f64) / 2.0).floor() as usize;
            let k = (((v + 1.0) * res as f64) / 2.0).floor() as usize;
            let pix = k.min(res - 1) * res + j.min(res - 1);
            !depth.is_hit(pix) || norm3(sub3(*p, o)) <= depth.depth[pix] + tolerance
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub latent: LatentCode,
    pub pose: CameraPose,
    /// `[3, H0, W0]`
    pub image_lo: Tensor,
    /// `[3, H1, W1]`
    pub image_hi: Tensor,
    /// Normalized surface depth per low-resolution pixel, 0 on background.
    pub depth: Vec<f64>,
    pub shape: ShapeDescriptor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub poses: PoseDistribution,
    /// Visibility tolerance as a fraction of the scene radius.
    pub visibility_tolerance: f64,
    pub filter_visibility: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self { poses: PoseDistribution::default(), visibility_tolerance: 1e-2, filter_visibility: true }
    }
}

/// Render one latent from one pose and build its full shape descriptor.
pub fn synthesize(gen: &Generator, latent: &LatentCode, pose: &CameraPose, cfg: &SynthesisConfig, rng: &mut impl Rng) -> Result<TrainingSample> {
    let mut g = Graph::new();
    let codes = g.constant(latent.codes.clone());
    let (vars, aux) = gen.render_graph(&mut g, codes, pose, None)?;
    let out = gen.collect(&g, vars, aux.clone());
    let gc = gen.config();
    let composite = composite_from_aux(&aux);
    let depth = DepthMap::from_weights(aux.rays, &composite);
    let surf = extract_surface_points(&depth);
    let field = GeneratorField { generator: gen, latent };
    let n_pixels = gc.lo_res * gc.lo_res;
    let free = if surf.points.is_empty() {
        Vec::new()
    } else {
        sample_free_points(&surf.points, gc.scene_radius, n_pixels, rng)?
    };
    let mut shape = compute_descriptor(&field, surf.points, free)?;
    if cfg.filter_visibility {
        let tol = cfg.visibility_tolerance * gc.scene_radius;
        let on = filter_visible(&shape.points_on, pose, &depth, tol);
        let fr = filter_visible(&shape.points_free, pose, &depth, tol);
        shape.retain(&on, &fr);
    }
    Ok(TrainingSample {
        latent: latent.clone(),
        pose: *pose,
        image_lo: out.lo.rgb,
        image_hi: out.image_hi,
        depth: depth.depth,
        shape,
    })
}

fn composite_from_aux(aux: &crate::generator::RenderAux) -> Vec<f64> {
    // weights = T_i - T_{i+1}, with T_{N+1} = T_N e^{-sigma_N delta_N} = 1 - weight_sum's complement
    let n = aux.rays.n_samples;
    let t = aux.transmittance.data();
    let mut w = vec![0.0; t.len()];
    for r in 0..aux.rays.n_rays() {
        let end = 1.0 - aux.weight_sum[r];
        for i in 0..n {
            let next = if i + 1 < n { t[r * n + i + 1] } else { end };
            w[r * n + i] = t[r * n + i] - next;
        }
    }
    w
}

/// Draw `n` fresh samples: one latent per sample, poses from `cfg.poses`.
pub fn sample_batch(gen: &Generator, n: usize, cfg: &SynthesisConfig, seed: u64) -> Result<Vec<TrainingSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latents = gen.sample_latent(n, rng.random())?;
    let gc = gen.config();
    latents
        .iter()
        .map(|w| {
            let pose = cfg.poses.sample(&mut rng, gc.fov, gc.camera_radius)?;
            synthesize(gen, w, &pose, cfg, &mut rng)
        })
        .collect()
}

/// Elliptical orbit of `frames` poses: azimuth `a cos θ`, elevation `b sin θ`.
pub fn trajectory_poses(frames: usize, semi_axes: [f64; 2], fov: f64, radius: f64) -> Result<Vec<CameraPose>> {
    if frames == 0 {
        return Err(invalid!("trajectory needs at least one frame"));
    }
    (0..frames)
        .map(|k| {
            let th = 2.0 * std::f64::consts::PI * k as f64 / frames as f64;
            CameraPose::new(semi_axes[0] * th.cos(), semi_axes[1] * th.sin(), fov, radius)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub latent: LatentCode,
    pub poses: Vec<CameraPose>,
    pub frames_hi: Vec<Tensor>,
    pub frames_lo: Vec<Tensor>,
}

pub fn render_trajectory(gen: &Generator, latent: &LatentCode, poses: &[CameraPose]) -> Result<Trajectory> {
    let mut frames_hi = Vec::with_capacity(poses.len());
    let mut frames_lo = Vec::with_capacity(poses.len());
    for p in poses {
        let o = gen.render(latent, p)?;
        frames_lo.push(o.lo.rgb);
        frames_hi.push(o.image_hi);
    }
    Ok(Trajectory { latent: latent.clone(), poses: poses.to_vec(), frames_hi, frames_lo })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_identities: usize,
    pub views_per_identity: usize,
    pub n_trajectories: usize,
    pub trajectory_frames: usize,
    pub trajectory_axes: [f64; 2],
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_identities: 8, views_per_identity: 2, n_trajectories: 4, trajectory_frames: 25, trajectory_axes: [0.5, 0.2], seed: 1234 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheIndex {
    pub version: u32,
    pub generator_checksum: String,
    pub config: DatasetConfig,
    pub samples: Vec<CacheEntry>,
    pub trajectories: Vec<CacheEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub file: String,
    pub sha256: String,
}

/// On-disk dataset of training samples and evaluation trajectories.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub index: CacheIndex,
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn points_to_tensor(p: &[Vec3]) -> Tensor {
    Tensor::new(&[p.len(), 3], p.iter().flatten().copied().collect())
}

fn tensor_to_points(t: &Tensor) -> Vec<Vec3> {
    t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn pose_json(p: &CameraPose) -> serde_json::Value {
    serde_json::to_value(p).expect("pose serializes")
}

fn sample_record(s: &TrainingSample) -> Checkpoint {
    let mut ck = Checkpoint::new("sample");
    ck.metadata.insert("pose".into(), pose_json(&s.pose));
    ck.insert("latent", s.latent.codes.clone());
    ck.insert("image_lo", s.image_lo.clone());
    ck.insert("image_hi", s.image_hi.clone());
    ck.insert("depth", Tensor::new(&[s.depth.len()], s.depth.clone()));
    ck.insert("points_on", points_to_tensor(&s.shape.points_on));
    ck.insert("points_free", points_to_tensor(&s.shape.points_free));
    ck.insert("sdf_free", Tensor::new(&[s.shape.sdf_free.len()], s.shape.sdf_free.clone()));
    ck.insert("normals_on", points_to_tensor(&s.shape.normals_on));
    let valid = s.shape.normal_valid.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<_>>();
    ck.insert("normal_valid", Tensor::new(&[valid.len()], valid));
    ck
}

fn sample_from_record(ck: &Checkpoint) -> Result<TrainingSample> {
    ck.expect_kind("sample")?;
    let pose: CameraPose = serde_json::from_value(ck.metadata.get("pose").cloned().unwrap_or_default())?;
    Ok(TrainingSample {
        latent: LatentCode::from_tensor(ck.get("latent")?.clone())?,
        pose,
        image_lo: ck.get("image_lo")?.clone(),
        image_hi: ck.get("image_hi")?.clone(),
        depth: ck.get("depth")?.data().to_vec(),
        shape: ShapeDescriptor {
            points_on: tensor_to_points(ck.get("points_on")?),
            points_free: tensor_to_points(ck.get("points_free")?),
            sdf_free: ck.get("sdf_free")?.data().to_vec(),
            normals_on: tensor_to_points(ck.get("normals_on")?),
            normal_valid: ck.get("normal_valid")?.data().iter().map(|&v| v > 0.5).collect(),
        },
    })
}

fn trajectory_record(t: &Trajectory) -> Checkpoint {
    let mut ck = Checkpoint::new("trajectory");
    ck.metadata.insert("poses".into(), serde_json::to_value(&t.poses).expect("poses serialize"));
    ck.insert("latent", t.latent.codes.clone());
    for (i, (hi, lo)) in t.frames_hi.iter().zip(&t.frames_lo).enumerate() {
        ck.insert(format!("frame{i:04}.hi"), hi.clone());
        ck.insert(format!("frame{i:04}.lo"), lo.clone());
    }
    ck
}

fn trajectory_from_record(ck: &Checkpoint) -> Result<Trajectory> {
    ck.expect_kind("trajectory")?;
    let poses: Vec<CameraPose> = serde_json::from_value(ck.metadata.get("poses").cloned().unwrap_or_default())?;
    let mut frames_hi = Vec::new();
    let mut frames_lo = Vec::new();
    for i in 0..poses.len() {
        frames_hi.push(ck.get(&format!("frame{i:04}.hi"))?.clone());
        frames_lo.push(ck.get(&format!("frame{i:04}.lo"))?.clone());
    }
    Ok(Trajectory { latent: LatentCode::from_tensor(ck.get("latent")?.clone())?, poses, frames_hi, frames_lo })
}

impl Dataset {
    /// Open a cache when it matches the generator and config, otherwise (re)build it.
    pub fn build(gen: &Generator, synth: &SynthesisConfig, cfg: &DatasetConfig, dir: &Path) -> Result<Self> {
        if let Ok(ds) = Self::open(dir) {
            if ds.index.version == CACHE_VERSION && ds.index.generator_checksum == gen.params().checksum() && ds.index.config == *cfg {
                return Ok(ds);
            }
        }
        if cfg.n_identities == 0 || cfg.views_per_identity == 0 {
            return Err(invalid!("dataset needs at least one identity and one view"));
        }
        fs::create_dir_all(dir.join("samples"))?;
        fs::create_dir_all(dir.join("trajectories"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gc = gen.config();
        let latents = gen.sample_latent(cfg.n_identities, rng.random())?;
        let mut samples = Vec::new();
        for (i, w) in latents.iter().enumerate() {
            for v in 0..cfg.views_per_identity {
                let pose = synth.poses.sample(&mut rng, gc.fov, gc.camera_radius)?;
                let s = synthesize(gen, w, &pose, synth, &mut rng)?;
                let file = format!("samples/id{i:04}-view{v:02}.rec");
                let bytes = sample_record(&s).to_bytes()?;
                fs::write(dir.join(&file), &bytes)?;
                samples.push(CacheEntry { file, sha256: sha_hex(&bytes) });
            }
        }
        let mut trajectories = Vec::new();
        if cfg.n_trajectories > 0 {
            let poses = trajectory_poses(cfg.trajectory_frames, cfg.trajectory_axes, gc.fov, gc.camera_radius)?;
            let tl = gen.sample_latent(cfg.n_trajectories, rng.random())?;
            for (i, w) in tl.iter().enumerate() {
                let t = render_trajectory(gen, w, &poses)?;
                let file = format!("trajectories/seq{i:03}.rec");
                let bytes = trajectory_record(&t).to_bytes()?;
                fs::write(dir.join(&file), &bytes)?;
                trajectories.push(CacheEntry { file, sha256: sha_hex(&bytes) });
            }
        }
        let index = CacheIndex {
            version: CACHE_VERSION,
            generator_checksum: gen.params().checksum(),
            config: cfg.clone(),
            samples,
            trajectories,
        };
        fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
        Ok(Self { dir: dir.to_path_buf(), index })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let raw = fs::read(dir.join("index.json"))?;
        let index: CacheIndex = serde_json::from_slice(&raw)?;
        if index.version != CACHE_VERSION {
            return Err(Error::State(format!("dataset cache version {} (expected {CACHE_VERSION})", index.version)));
        }
        Ok(Self { dir: dir.to_path_buf(), index })
    }

    pub fn len(&self) -> usize {
        self.index.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> Result<TrainingSample> {
        let e = self.index.samples.get(i).ok_or_else(|| invalid!("sample index {i} out of range"))?;
        sample_from_record(&Checkpoint::load(&self.dir.join(&e.file))?)
    }

    pub fn samples(&self) -> Result<Vec<TrainingSample>> {
        (0..self.len()).map(|i| self.sample(i)).collect()
    }

    pub fn trajectories(&self) -> Result<Vec<Trajectory>> {
        self.index
            .trajectories
            .iter()
            .map(|e| trajectory_from_record(&Checkpoint::load(&self.dir.join(&e.file))?))
            .collect()
    }
}

/// Write trajectory frames as PNGs plus a `frame,azimuth,elevation` CSV.
pub fn export_trajectory(t: &Trajectory, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from("frame,azimuth,elevation\n");
    for (i, (p, f)) in t.poses.iter().zip(&t.frames_hi).enumerate() {
        crate::imageio::save_png(f, &dir.join(format!("frame{i:04}.png")))?;
        csv.push_str(&format!("{i},{:.6},{:.6}\n", p.azimuth, p.elevation));
    }
    fs::write(dir.join("poses.csv"), csv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;

    fn sphere() -> AnalyticSphere {
        AnalyticSphere { center: [0.0; 3], radius: 1.0, alpha: 0.01 }
    }

    #[test]
    fn zero_curriculum_returns_mean() {
        let d = PoseDistribution { mean: [0.2, -0.1], std: [0.5, 0.3], curriculum: 0.0 };
        for s in 0..20 {
            let p = sample_pose(&d, s, 0.6, 2.5).unwrap();
            assert_eq!((p.azimuth, p.elevation), (0.2, -0.1));
        }
    }

    #[test]
    fn full_curriculum_matches_std() {
        let d = PoseDistribution { mean: [0.0, 0.0], std: [0.3, 0.15], curriculum: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let poses: Vec<_> = (0..10_000).map(|_| d.sample(&mut rng, 0.6, 2.5).unwrap()).collect();
        let std = |f: &dyn Fn(&CameraPose) -> f64| {
            let m = poses.iter().map(f).sum::<f64>() / poses.len() as f64;
            (poses.iter().map(|p| (f(p) - m).powi(2)).sum::<f64>() / poses.len() as f64).sqrt()
        };
        assert!((std(&|p| p.azimuth) / 0.3 - 1.0).abs() < 0.05);
        assert!((std(&|p| p.elevation) / 0.15 - 1.0).abs() < 0.05);
        assert_eq!(sample_pose(&d, 8, 0.6, 2.5).unwrap(), sample_pose(&d, 8, 0.6, 2.5).unwrap());
    }

    #[test]
    fn sphere_surface_points_lie_on_sphere() {
        for n in [16, 32] {
            let pose = CameraPose::new(0.4, 0.2, 0.9, 2.5).unwrap();
            let dm = trace_depth(&sphere(), &pose, 24, n, SceneBounds { scene_radius: 1.0 }).unwrap();
            let s = extract_surface_points(&dm);
            assert_eq!(s.points.len() + s.dropped, 24 * 24);
            assert!(s.points.len() > 100);
            for p in &s.points {
                assert!((norm3(*p) - 1.0).abs() <= 2.0 / n as f64, "radius {} at n={n}", norm3(*p));
            }
        }
    }

    #[test]
    fn free_point_counts_and_spread() {
        let on = vec![[0.0; 3]; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = sample_free_points(&on, 1.0, 2 * 32 * 32, &mut rng).unwrap();
        assert_eq!(f.len(), 3072);
        let f = sample_free_points(&on, 0.8, 100_000, &mut rng).unwrap();
        let near = &f[..100_000];
        let var = near.iter().map(|p| p[0] * p[0]).sum::<f64>() / near.len() as f64;
        assert!((var.sqrt() / 0.2 - 1.0).abs() < 0.05);
        let z = sample_free_points(&on, 0.0, 8, &mut rng).unwrap();
        assert_eq!(z.len(), 12);
        assert!(z.iter().flatten().all(|&c| c == 0.0));
        assert!(sample_free_points(&[], 1.0, 8, &mut rng).is_err());
    }

    #[test]
    fn sphere_normals_are_radial() {
        let pts = vec![[0.3, 0.4, 0.5], [-0.9, 0.1, 0.0], [0.0, 0.0, 1.0]];
        let d = compute_descriptor(&sphere(), pts.clone(), vec![[0.0, 0.0, 2.0]]).unwrap();
        for (p, n) in pts.iter().zip(&d.normals_on) {
            let r = norm3(*p);
            for k in 0..3 {
                assert!((n[k] - p[k] / r).abs() < 1e-4);
            }
        }
        assert_eq!(d.sdf_free, vec![1.0]);
        let d = compute_descriptor(&sphere(), vec![[0.0; 3]], vec![]).unwrap();
        assert!(!d.normal_valid[0]);
    }

    #[test]
    fn visibility_rules() {
        let pose = CameraPose::new(0.0, 0.0, 0.9, 2.5).unwrap();
        let dm = trace_depth(&sphere(), &pose, 32, 64, SceneBounds { scene_radius: 1.0 }).unwrap();
        let s = extract_surface_points(&dm);
        let vis = filter_visible(&s.points, &pose, &dm, 1e-3);
        assert!(vis.iter().all(|&v| v));
        let behind: Vec<Vec3> = s
            .pixels
            .iter()
            .zip(&s.points)
            .map(|(&r, p)| {
                let d = dm.rays.directions[r];
                [p[0] + 0.5 * d[0], p[1] + 0.5 * d[1], p[2] + 0.5 * d[2]]
            })
            .collect();
        assert!(filter_visible(&behind, &pose, &dm, 1e-3).iter().all(|&v| !v));
        let fib = crate::eval::fibonacci_sphere(4000, 1.0);
        let back: Vec<Vec3> = fib.into_iter().filter(|p| p[2] < -0.05).collect();
        let vis = filter_visible(&back, &pose, &dm, 1e-3);
        let rejected = vis.iter().filter(|v| !**v).count() as f64 / back.len() as f64;
        assert!(rejected > 0.95, "rejected {rejected}");
        let outside = filter_visible(&[[5.0, 0.0, 0.0]], &pose, &dm, 1e-3);
        assert_eq!(outside, vec![false]);
    }

    fn tiny_gen() -> Generator {
        Generator::new(GeneratorConfig { latent_dim: 8, width: 16, feature_channels: 4, g1_hidden: 4, lo_res: 8, n_samples: 8, ..Default::default() }).unwrap()
    }

    #[test]
    fn synthesized_samples_have_consistent_counts() {
        let gen = tiny_gen();
        let cfg = SynthesisConfig { filter_visibility: false, ..Default::default() };
        let b = sample_batch(&gen, 2, &cfg, 3).unwrap();
        for s in &b {
            let dropped = 64 - s.shape.points_on.len();
            assert!(dropped < 64);
            assert_eq!(s.shape.points_free.len(), 96);
            let (n, _) = (&s.shape.normals_on, ());
            assert!(n.iter().all(|v| (norm3(*v) - 1.0).abs() < 1e-5));
            let field = GeneratorField { generator: &gen, latent: &s.latent };
            let on = field.sdf(&s.shape.points_on).unwrap();
            let m_on = on.iter().map(|v| v.abs()).sum::<f64>() / on.len() as f64;
            let m_free = s.shape.sdf_free.iter().map(|v| v.abs()).sum::<f64>() / s.shape.sdf_free.len() as f64;
            assert!(m_on < m_free, "{m_on} vs {m_free}");
        }
        let again = sample_batch(&gen, 2, &cfg, 3).unwrap();
        assert_eq!(again[1].image_hi, b[1].image_hi);
        assert_eq!(again[1].shape, b[1].shape);
    }

    #[test]
    fn dataset_cache_is_reproducible() {
        let gen = tiny_gen();
        let cfg = DatasetConfig { n_identities: 3, views_per_identity: 2, n_trajectories: 1, trajectory_frames: 4, ..Default::default() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let da = Dataset::build(&gen, &SynthesisConfig::default(), &cfg, a.path()).unwrap();
        let db = Dataset::build(&gen, &SynthesisConfig::default(), &cfg, b.path()).unwrap();
        assert_eq!(da.len(), 6);
        assert_eq!(da.index.samples, db.index.samples);
        assert_eq!(da.index.samples[1].file, "samples/id0000-view01.rec");
        let s = da.sample(3).unwrap();
        assert_eq!(s.image_hi.shape(), &[3, 16, 16]);
        let t = da.trajectories().unwrap();
        assert_eq!(t[0].frames_hi.len(), 4);
        // stale version forces a rebuild
        let mut idx = da.index.clone();
        idx.version = 0;
        fs::write(a.path().join("index.json"), serde_json::to_vec(&idx).unwrap()).unwrap();
        let rebuilt = Dataset::build(&gen, &SynthesisConfig::default(), &cfg, a.path()).unwrap();
        assert_eq!(rebuilt.index.version, CACHE_VERSION);
        assert_eq!(rebuilt.index.samples, db.index.samples);
    }
}
