//! Camera model, ray generation, SDF-to-density conversion and
//! transmittance-weighted volume integration.
//!
//! All functions here are pure. The differentiable counterparts used during
//! training ([`Graph::composite`](crate::autograd::Graph::composite),
//! [`Graph::ray_sum`](crate::autograd::Graph::ray_sum)) call into
//! [`composite_weights`] so both paths share one quadrature.
//!
//! Conventions:
//! * the camera orbits the origin and always looks at it; azimuth 0 and
//!   elevation 0 put it on the +z axis looking down -z, +y is up;
//! * normalized image coordinates `(u, v)` lie in `[-1, 1]²`, `u` grows to
//!   the right and `v` grows downward, pixel centres sit at `(2j + 1)/W - 1`
//!   (align-corners-false);
//! * rays are stored ray-major, row by row, so ray `i * W + j` goes through
//!   pixel `(i, j)` and its samples are contiguous.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Rays whose accumulated weight stays below this are treated as background.
pub const BACKGROUND_WEIGHT: f64 = 1e-3;

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn norm3(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize3(a: Vec3) -> Vec3 {
    let n = norm3(a);
    if n > 0.0 {
        scale3(a, 1.0 / n)
    } else {
        a
    }
}

/// A viewpoint on a sphere around the origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Radians, rotation about +y.
    pub azimuth: f64,
    /// Radians, positive looks down from above.
    pub elevation: f64,
    /// Full vertical field of view in radians.
    pub fov: f64,
    /// Distance from the camera centre to the origin.
    pub radius: f64,
}

/// Orthonormal camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraFrame {
    pub origin: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
}

impl CameraPose {
    pub fn new(azimuth: f64, elevation: f64, fov: f64, radius: f64) -> Result<Self> {
        let p = Self { azimuth, elevation, fov, radius };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov > 0.0 && self.fov < std::f64::consts::PI) {
            return Err(invalid!("fov {} must lie in (0, pi)", self.fov));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(invalid!("camera radius {} must be positive", self.radius));
        }
        if !(self.elevation.abs() < std::f64::consts::FRAC_PI_2) {
            return Err(invalid!("elevation {} must lie strictly inside (-pi/2, pi/2)", self.elevation));
        }
        if !self.azimuth.is_finite() {
            return Err(invalid!("azimuth must be finite"));
        }
        Ok(())
    }

    pub fn with_angles(&self, azimuth: f64, elevation: f64) -> Self {
        Self { azimuth, elevation, ..*self }
    }

    pub fn position(&self) -> Vec3 {
        let (sa, ca) = self.azimuth.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        [self.radius * ce * sa, self.radius * se, self.radius * ce * ca]
    }

    pub fn frame(&self) -> CameraFrame {
        let origin = self.position();
        let forward = normalize3(scale3(origin, -1.0));
        let right = normalize3(cross(forward, [0.0, 1.0, 0.0]));
        let up = cross(right, forward);
        CameraFrame { origin, right, up, forward }
    }

    /// Camera-to-world rigid transform as a row-major 4x4 matrix with
    /// columns `[right, up, -forward, origin]`.
    pub fn extrinsic(&self) -> [[f64; 4]; 4] {
        let f = self.frame();
        let back = scale3(f.forward, -1.0);
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            m[r] = [f.right[r], f.up[r], back[r], f.origin[r]];
        }
        m[3] = [0.0, 0.0, 0.0, 1.0];
        m
    }

    pub fn tan_half_fov(&self) -> f64 {
        (self.fov * 0.5).tan()
    }
}

/// Near/far bounds of the sampled interval: `[radius - r, radius + r]` for scene radius `r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub scene_radius: f64,
}

impl SceneBounds {
    pub fn near_far(&self, pose: &CameraPose) -> (f64, f64) {
        ((pose.radius - self.scene_radius).max(1e-6), pose.radius + self.scene_radius)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// Midpoints of uniform bins.
    Midpoint,
    /// One uniform jitter per bin, drawn from a seeded stream.
    Stratified(u64),
}

#[derive(Clone, Debug)]
pub struct RayBundle {
    pub height: usize,
    pub width: usize,
    pub n_samples: usize,
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    pub t_near: f64,
    pub t_far: f64,
    /// `[H*W, N]`, strictly increasing per ray.
    pub sample_depths: Tensor,
}

impl RayBundle {
    pub fn n_rays(&self) -> usize {
        self.origins.len()
    }

    /// Every sample position, ray-major: `[H*W*N]` points.
    pub fn points(&self) -> Vec<Vec3> {
        let n = self.n_samples;
        let t = self.sample_depths.data();
        let mut out = Vec::with_capacity(self.n_rays() * n);
        for (r, (o, d)) in self.origins.iter().zip(&self.directions).enumerate() {
            for i in 0..n {
                out.push(add3(*o, scale3(*d, t[r * n + i])));
            }
        }
        out
    }

    /// View direction of every sample, aligned with [`RayBundle::points`].
    pub fn sample_directions(&self) -> Vec<Vec3> {
        let n = self.n_samples;
        self.directions.iter().flat_map(|d| std::iter::repeat_n(*d, n)).collect()
    }

    /// Bin widths `[H*W, N]`; the last bin extends to `t_far`.
    pub fn deltas(&self) -> Tensor {
        bin_widths(&self.sample_depths, self.t_far)
    }
}

pub fn bin_widths(depths: &Tensor, t_far: f64) -> Tensor {
    let n = depths.as_matrix_dims().1;
    let t = depths.data();
    let mut out = vec![0.0; t.len()];
    for (row, dst) in t.chunks(n).zip(out.chunks_mut(n)) {
        for i in 0..n {
            dst[i] = if i + 1 < n { row[i + 1] - row[i] } else { t_far - row[i] };
        }
    }
    Tensor::new(depths.shape(), out)
}

/// Normalized coordinate of the centre of pixel index `i` along an axis of `size` pixels.
pub fn pixel_center(i: usize, size: usize) -> f64 {
    (2 * i + 1) as f64 / size as f64 - 1.0
}

/// One ray per pixel centre.
pub fn generate_rays(
    pose: &CameraPose,
    resolution: (usize, usize),
    n_samples: usize,
    bounds: SceneBounds,
    sampling: Sampling,
) -> Result<RayBundle> {
    let (h, w) = resolution;
    if h == 0 || w == 0 {
        return Err(invalid!("resolution must be positive, got {h}x{w}"));
    }
    if n_samples == 0 {
        return Err(invalid!("n_samples must be positive"));
    }
    pose.validate()?;
    let frame = pose.frame();
    let th = pose.tan_half_fov();
    let aspect = w as f64 / h as f64;
    let (t_near, t_far) = bounds.near_far(pose);
    let mut directions = Vec::with_capacity(h * w);
    for i in 0..h {
        let v = pixel_center(i, h);
        for j in 0..w {
            let u = pixel_center(j, w);
            let d = add3(frame.forward, add3(scale3(frame.right, u * th * aspect), scale3(frame.up, -v * th)));
            directions.push(normalize3(d));
        }
    }
    let bin = (t_far - t_near) / n_samples as f64;
    let mut depths = Vec::with_capacity(h * w * n_samples);
    match sampling {
        Sampling::Midpoint => {
            for _ in 0..h * w {
                depths.extend((0..n_samples).map(|i| t_near + (i as f64 + 0.5) * bin));
            }
        }
        Sampling::Stratified(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..h * w {
                // open interval keeps samples strictly inside each bin
                depths.extend((0..n_samples).map(|i| t_near + (i as f64 + rng.random_range(1e-6..1.0 - 1e-6)) * bin));
            }
        }
    }
    Ok(RayBundle {
        height: h,
        width: w,
        n_samples,
        origins: vec![frame.origin; h * w],
        directions,
        t_near,
        t_far,
        sample_depths: Tensor::new(&[h * w, n_samples], depths),
    })
}

/// `Sigmoid(-d / alpha) / alpha`.
pub fn density(sdf: f64, alpha: f64) -> f64 {
    crate::autograd::sigmoid(-sdf / alpha) / alpha
}

pub fn sdf_to_density(sdf: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(invalid!("density tightness alpha must be positive, got {alpha}"));
    }
    Ok(sdf.iter().map(|&d| density(d, alpha)).collect())
}

/// Alpha-compositing weights and the transmittance in front of each sample.
///
/// `sigma` and `deltas` are flat `[R * n]` buffers.
pub fn composite_weights(sigma: &[f64], deltas: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut weights = vec![0.0; sigma.len()];
    let mut trans = vec![0.0; sigma.len()];
    for ((s, d), (w, t)) in sigma.chunks(n).zip(deltas.chunks(n)).zip(weights.chunks_mut(n).zip(trans.chunks_mut(n))) {
        let mut acc = 1.0;
        for i in 0..n {
            let e = (-s[i] * d[i]).exp();
            t[i] = acc;
            w[i] = acc * (1.0 - e);
            acc *= e;
        }
    }
    (weights, trans)
}

#[derive(Clone, Debug)]
pub struct VolumeIntegral {
    /// `[R, K]`
    pub integrated: Tensor,
    /// `[R, N]`
    pub weights: Tensor,
    /// `[R, N]`, transmittance in front of each sample.
    pub transmittance: Tensor,
    /// `[R]`
    pub weight_sum: Vec<f64>,
}

fn check_profile(densities: &Tensor, depths: &Tensor) -> Result<(usize, usize)> {
    let (r, n) = densities.as_matrix_dims();
    if depths.len() != r * n {
        return Err(shape_err!("densities {:?} vs sample depths {:?}", densities.shape(), depths.shape()));
    }
    if let Some(bad) = densities.data().iter().find(|&&s| !(s >= 0.0)) {
        return Err(invalid!("densities must be non-negative, found {bad}"));
    }
    for row in depths.data().chunks(n) {
        if row.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid!("sample depths must be strictly increasing along each ray"));
        }
    }
    Ok((r, n))
}

/// Discrete quadrature of `C(r) = ∫ T(t) σ(t) c(t) dt`.
///
/// `values` is `[R, N, K]` (or `[R*N, K]`), `densities` and `sample_depths` are `[R, N]`.
pub fn volume_integrate(values: &Tensor, densities: &Tensor, sample_depths: &Tensor, t_far: f64) -> Result<VolumeIntegral> {
    let (r, n) = check_profile(densities, sample_depths)?;
    let k = values.as_matrix_dims().1;
    if values.len() != r * n * k {
        return Err(shape_err!("values {:?} do not conform to {r} rays x {n} samples", values.shape()));
    }
    if let Some(&last) = sample_depths.data().iter().max_by(|a, b| a.total_cmp(b)) {
        if last > t_far {
            return Err(invalid!("sample depth {last} lies beyond t_far {t_far}"));
        }
    }
    let deltas = bin_widths(sample_depths, t_far);
    let (w, t) = composite_weights(densities.data(), deltas.data(), n);
    let v = values.data();
    let mut out = vec![0.0; r * k];
    for ray in 0..r {
        for i in 0..n {
            let wi = w[ray * n + i];
            for c in 0..k {
                out[ray * k + c] += wi * v[(ray * n + i) * k + c];
            }
        }
    }
    // 1 - T_end rather than a running sum, which can round past 1 once T vanishes.
    let sigma = densities.data();
    let dl = deltas.data();
    let weight_sum = (0..r)
        .map(|ray| match n {
            0 => 0.0,
            _ => {
                let last = ray * n + n - 1;
                1.0 - t[last] * (-sigma[last] * dl[last]).exp()
            }
        })
        .collect();
    Ok(VolumeIntegral {
        integrated: Tensor::new(&[r, k], out),
        weights: Tensor::new(&[r, n], w),
        transmittance: Tensor::new(&[r, n], t),
        weight_sum,
    })
}

/// Expected termination depth `t_s = ∫ T σ t dt` and the accumulated weight per ray.
pub fn render_depth(densities: &Tensor, sample_depths: &Tensor, t_far: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (r, n) = check_profile(densities, sample_depths)?;
    let values = sample_depths.clone().reshape(&[r * n, 1]);
    let vi = volume_integrate(&values, densities, sample_depths, t_far)?;
    Ok((vi.integrated.into_data(), vi.weight_sum))
}

pub fn positional_encoding_width(n_frequencies: usize) -> usize {
    3 + 6 * n_frequencies
}

/// `[x, sin(2^k π x), cos(2^k π x)]_{k < n}` per point, `[n_points, 3 + 6 n]`.
pub fn positional_encode(x: &[Vec3], n_frequencies: usize) -> Tensor {
    let width = positional_encoding_width(n_frequencies);
    let mut out = Vec::with_capacity(x.len() * width);
    for p in x {
        out.extend_from_slice(p);
        for k in 0..n_frequencies {
            let f = (1u64 << k) as f64 * std::f64::consts::PI;
            out.extend(p.iter().map(|c| (f * c).sin()));
            out.extend(p.iter().map(|c| (f * c).cos()));
        }
    }
    Tensor::new(&[x.len(), width], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub uv: Vec<[f64; 2]>,
    /// False for points on or behind the camera plane.
    pub valid: Vec<bool>,
    /// Distance along the optical axis.
    pub camera_depth: Vec<f64>,
}

/// Pinhole projection into normalized image coordinates.
pub fn project_to_image(points: &[Vec3], pose: &CameraPose, resolution: (usize, usize)) -> Projection {
    let f = pose.frame();
    let th = pose.tan_half_fov();
    let aspect = resolution.1 as f64 / resolution.0 as f64;
    let mut uv = Vec::with_capacity(points.len());
    let mut valid = Vec::with_capacity(points.len());
    let mut camera_depth = Vec::with_capacity(points.len());
    for p in points {
        let rel = sub3(*p, f.origin);
        let z = dot(rel, f.forward);
        let ok = z > 1e-12 && p.iter().all(|c| c.is_finite());
        if ok {
            uv.push([dot(rel, f.right) / (z * th * aspect), -dot(rel, f.up) / (z * th)]);
        } else {
            uv.push([f64::NAN, f64::NAN]);
        }
        valid.push(ok);
        camera_depth.push(z);
    }
    Projection { uv, valid, camera_depth }
}

/// Output of a full render.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    /// `[3, H, W]` in `[0, 1]`.
    pub rgb: Tensor,
    /// `[C, H, W]`.
    pub feature_map: Tensor,
    /// `[H, W]`, expected termination depth (0 on background rays).
    pub depth: Tensor,
    /// `[H, W]`.
    pub weight_sum: Tensor,
    /// `[H*W, N]`.
    pub transmittance: Tensor,
}
