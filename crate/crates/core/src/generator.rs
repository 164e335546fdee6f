//! The frozen style-based SDF generator and the image discriminator.
//!
//! `G0` is a FiLM-SIREN trunk: each of its layers computes
//! `h <- sin(gamma_l * (h W_l + b_l) + beta_l)` where `(gamma_l, beta_l)` are
//! affine functions of the per-layer style code `w_l`. The signed distance is
//! a sphere prior plus a learned offset, `d(x) = |x| - R0 + phi_g(f_G(x))`.
//! View-dependent features `phi_f(f_G, v)` and colors `phi_c(f)` are volume
//! rendered into a low-resolution image `I_0` and a feature map `F`, and `G1`
//! (nearest upsampling plus style-modulated convolutions) lifts `F` to the
//! high-resolution image `I`.
//!
//! Image tensors are channels-first: `[3, H, W]` and `[C, H, W]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{normal_tensor, uniform_tensor, Linear, ParamSet};
use crate::rendering::{
    generate_rays, norm3, CameraPose, RayBundle, RenderOutput, Sampling, SceneBounds, Vec3, BACKGROUND_WEIGHT,
};
use crate::tensor::Tensor;

pub const GENERATOR_KIND: &str = "generator";
pub const DISCRIMINATOR_KIND: &str = "discriminator";

const LRELU: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    /// Style injection sites in the SDF trunk.
    pub g0_layers: usize,
    /// Style-modulated convolutions in the upsampler.
    pub g1_layers: usize,
    pub width: usize,
    pub feature_channels: usize,
    pub g1_hidden: usize,
    pub lo_res: usize,
    pub upsample: usize,
    pub n_samples: usize,
    pub fov: f64,
    pub camera_radius: f64,
    pub scene_radius: f64,
    pub sphere_radius: f64,
    /// Density tightness.
    pub alpha: f64,
    /// Frequency scale of the first trunk layer.
    pub omega: f64,
    pub style_gain: f64,
    pub sdf_gain: f64,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            g0_layers: 4,
            g1_layers: 2,
            width: 64,
            feature_channels: 16,
            g1_hidden: 16,
            lo_res: 32,
            upsample: 2,
            n_samples: 16,
            fov: 0.6,
            camera_radius: 2.5,
            scene_radius: 1.0,
            sphere_radius: 0.5,
            alpha: 0.05,
            omega: 3.0,
            style_gain: 0.5,
            sdf_gain: 0.15,
            background: [1.0, 1.0, 1.0],
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn hi_res(&self) -> usize {
        self.lo_res * self.upsample
    }

    pub fn n_styles(&self) -> usize {
        self.g0_layers + self.g1_layers
    }

    pub fn bounds(&self) -> SceneBounds {
        SceneBounds { scene_radius: self.scene_radius }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("g0_layers", self.g0_layers),
            ("g1_layers", self.g1_layers),
            ("width", self.width),
            ("feature_channels", self.feature_channels),
            ("g1_hidden", self.g1_hidden),
            ("lo_res", self.lo_res),
            ("upsample", self.upsample),
            ("n_samples", self.n_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("generator.{name} must be positive")));
            }
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("generator.alpha must be positive".into()));
        }
        if !(self.scene_radius > 0.0 && self.camera_radius > self.scene_radius) {
            return Err(Error::Config("generator.camera_radius must exceed scene_radius > 0".into()));
        }
        Ok(())
    }

    /// Pose looking at the origin from the configured distance.
    pub fn pose(&self, azimuth: f64, elevation: f64) -> Result<CameraPose> {
        CameraPose::new(azimuth, elevation, self.fov, self.camera_radius)
    }
}

/// Per-layer style codes `w_0 .. w_{L-1}`, stored as `[L, D_w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub codes: Tensor,
}

impl LatentCode {
    /// Repeat one W-space vector across `n_layers` style sites.
    pub fn broadcast(w: &[f64], n_layers: usize) -> Self {
        let mut data = Vec::with_capacity(w.len() * n_layers);
        for _ in 0..n_layers {
            data.extend_from_slice(w);
        }
        Self { codes: Tensor::new(&[n_layers, w.len()], data) }
    }

    pub fn from_tensor(codes: Tensor) -> Result<Self> {
        if codes.ndim() != 2 {
            return Err(shape_err!("latent codes must be [L, D], got {:?}", codes.shape()));
        }
        if !codes.all_finite() {
            return Err(Error::Numerical("latent code contains non-finite values".into()));
        }
        Ok(Self { codes })
    }

    pub fn n_layers(&self) -> usize {
        self.codes.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.codes.dim(1)
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        let d = self.dim();
        &self.codes.data()[l * d..(l + 1) * d]
    }
}

/// Per-point decoder outputs.
#[derive(Clone, Debug)]
pub struct PointDecodeOutput {
    /// `[P, width]`
    pub f_g: Tensor,
    /// `[P]`
    pub sdf: Tensor,
    /// `[P, C_feat]`
    pub feature: Tensor,
    /// `[P, 3]`
    pub color: Tensor,
}

/// Full render of one latent from one pose.
#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub lo: RenderOutput,
    /// `[3, H1, W1]`
    pub image_hi: Tensor,
}

impl GeneratorOutput {
    pub fn image_lo(&self) -> &Tensor {
        &self.lo.rgb
    }
}

/// Graph handles of a differentiable render.
#[derive(Clone, Copy, Debug)]
pub struct RenderVars {
    pub rgb_lo: Var,
    pub feature: Var,
    pub rgb_hi: Var,
}

/// Values of a differentiable render that are not differentiated.
#[derive(Clone, Debug)]
pub struct RenderAux {
    pub rays: RayBundle,
    /// `[H0 * W0]`, 0 on background rays.
    pub depth: Vec<f64>,
    pub weight_sum: Vec<f64>,
    /// `[H0 * W0, N]`
    pub transmittance: Tensor,
}

/// Hook applied to the per-sample global features before the feature and color heads.
pub type Modulator<'a> = &'a mut dyn FnMut(&mut Graph, Var, &[Vec3]) -> Var;

struct StyleLayer {
    scale: Linear,
    shift: Linear,
}

pub struct Generator {
    cfg: GeneratorConfig,
    params: ParamSet,
    mapping: Vec<Linear>,
    trunk: Vec<Linear>,
    styles: Vec<StyleLayer>,
    sdf_head: Linear,
    feat_head: Linear,
    color_head: Linear,
    g1_styles: Vec<Linear>,
    g1_convs: Vec<(usize, usize)>,
    w_avg: usize,
    alpha: usize,
}

/// Standard-normal `z` vectors, `n` rows of `dim`, deterministic in `seed`.
pub fn sample_z(n: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(invalid!("sample count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()).collect())
}

impl Generator {
    /// Seeded random generator; the same config always yields the same weights.
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6765_6e65);
        let mut ps = ParamSet::new("gen");
        let d = cfg.latent_dim;
        let width = cfg.width;
        let mapping = vec![
            Linear::new(&mut ps, "map0", d, d, 2f64.sqrt(), &mut rng),
            Linear::new(&mut ps, "map1", d, d, 1.0, &mut rng),
        ];
        let mut trunk = Vec::new();
        let mut styles = Vec::new();
        for l in 0..cfg.g0_layers {
            let fan_in = if l == 0 { 3 } else { width };
            let (wb, bb) = if l == 0 {
                (cfg.omega, std::f64::consts::PI)
            } else {
                ((6.0 / width as f64).sqrt(), 1.0 / (width as f64).sqrt())
            };
            let w = ps.add(&format!("trunk{l}.w"), uniform_tensor(&mut rng, &[fan_in, width], wb));
            let b = ps.add(&format!("trunk{l}.b"), uniform_tensor(&mut rng, &[width], bb));
            trunk.push(Linear { w, b, fan_in, fan_out: width });
            styles.push(StyleLayer {
                scale: Linear::new(&mut ps, &format!("style{l}.scale"), d, width, cfg.style_gain, &mut rng),
                shift: Linear::new(&mut ps, &format!("style{l}.shift"), d, width, cfg.style_gain, &mut rng),
            });
        }
        let sdf_head = Linear::new(&mut ps, "sdf", width, 1, cfg.sdf_gain, &mut rng);
        let feat_head = Linear::new(&mut ps, "feat", width + 3, cfg.feature_channels, 2f64.sqrt(), &mut rng);
        let color_head = Linear::new(&mut ps, "color", cfg.feature_channels, 3, 1.5, &mut rng);
        let mut g1_styles = Vec::new();
        let mut g1_convs = Vec::new();
        let mut in_ch = cfg.feature_channels;
        for l in 0..cfg.g1_layers {
            let last = l + 1 == cfg.g1_layers;
            let out_ch = if last { 3 } else { cfg.g1_hidden };
            g1_styles.push(Linear::new(&mut ps, &format!("g1style{l}"), d, in_ch, cfg.style_gain, &mut rng));
            let gain = if last { 1.0 } else { 2f64.sqrt() };
            let w = ps.add(
                &format!("g1conv{l}.w"),
                normal_tensor(&mut rng, &[out_ch, in_ch, 3, 3], gain / ((in_ch * 9) as f64).sqrt()),
            );
            let b = ps.add(&format!("g1conv{l}.b"), Tensor::zeros(&[out_ch]));
            g1_convs.push((w, b));
            in_ch = out_ch;
        }
        let w_avg = ps.add("w_avg", Tensor::zeros(&[d]));
        let alpha = ps.add("alpha", Tensor::scalar(cfg.alpha));
        let mut gen = Self {
            cfg,
            params: ps,
            mapping,
            trunk,
            styles,
            sdf_head,
            feat_head,
            color_head,
            g1_styles,
            g1_convs,
            w_avg,
            alpha,
        };
        let zs = sample_z(4096, d, gen.cfg.seed ^ 0x7761_7667)?;
        let mut avg = vec![0.0; d];
        for z in &zs {
            for (a, v) in avg.iter_mut().zip(gen.map(z)?) {
                *a += v / zs.len() as f64;
            }
        }
        *gen.params.value_mut(gen.w_avg) = Tensor::new(&[d], avg);
        gen.params.set_frozen(true);
        Ok(gen)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn alpha(&self) -> f64 {
        self.params.value(self.alpha).item()
    }

    /// Mean of the mapped latent distribution.
    pub fn w_avg(&self) -> &[f64] {
        self.params.value(self.w_avg).data()
    }

    pub fn w_avg_code(&self) -> LatentCode {
        LatentCode::broadcast(self.w_avg(), self.cfg.n_styles())
    }

    /// Mapping network `z -> w`.
    pub fn map(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.cfg.latent_dim {
            return Err(shape_err!("z has {} entries, expected {}", z.len(), self.cfg.latent_dim));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, z.len()], z.to_vec()));
        let h = self.mapping[0].forward(&mut g, &self.params, x);
        let h = g.leaky_relu(h, LRELU);
        let w = self.mapping[1].forward(&mut g, &self.params, h);
        Ok(g.value(w).data().to_vec())
    }

    /// `n` latent codes drawn through the mapping network.
    pub fn sample_latent(&self, n: usize, seed: u64) -> Result<Vec<LatentCode>> {
        sample_z(n, self.cfg.latent_dim, seed)?
            .iter()
            .map(|z| Ok(LatentCode::broadcast(&self.map(z)?, self.cfg.n_styles())))
            .collect()
    }

    pub fn check_code(&self, w: &LatentCode) -> Result<()> {
        if w.n_layers() != self.cfg.n_styles() || w.dim() != self.cfg.latent_dim {
            return Err(shape_err!(
                "latent is [{}, {}], generator expects [{}, {}]",
                w.n_layers(),
                w.dim(),
                self.cfg.n_styles(),
                self.cfg.latent_dim
            ));
        }
        Ok(())
    }

    fn style_row(&self, g: &mut Graph, codes: Var, l: usize) -> Var {
        g.slice_rows(codes, l, l + 1)
    }

    fn trunk_styles(&self, g: &mut Graph, codes: Var, l: usize) -> (Var, Var) {
        let wl = self.style_row(g, codes, l);
        let s = self.styles[l].scale.forward(g, &self.params, wl);
        let gamma = g.add_scalar(s, 1.0);
        let beta = self.styles[l].shift.forward(g, &self.params, wl);
        let width = self.cfg.width;
        (g.reshape(gamma, &[width]), g.reshape(beta, &[width]))
    }

    /// Global features `f_G(x)` for `[P, 3]` points.
    pub fn trunk(&self, g: &mut Graph, codes: Var, x: Var) -> Var {
        let mut h = x;
        for l in 0..self.cfg.g0_layers {
            let (gamma, beta) = self.trunk_styles(g, codes, l);
            let pre = self.trunk[l].forward(g, &self.params, h);
            let a = g.mul_row(pre, gamma);
            let a = g.add_row(a, beta);
            h = g.sin(a);
        }
        h
    }

    /// Global features together with their derivatives along each coordinate axis.
    pub fn trunk_with_tangents(&self, g: &mut Graph, codes: Var, x: Var) -> (Var, [Var; 3]) {
        let width = self.cfg.width;
        let mut h = x;
        let mut tangents: Option<[Var; 3]> = None;
        for l in 0..self.cfg.g0_layers {
            let (gamma, beta) = self.trunk_styles(g, codes, l);
            let pre = self.trunk[l].forward(g, &self.params, h);
            let a = g.mul_row(pre, gamma);
            let a = g.add_row(a, beta);
            let cos = g.cos(a);
            let w = g.param(&self.params, self.trunk[l].w);
            let next: [Var; 3] = std::array::from_fn(|k| {
                let da = match tangents {
                    None => {
                        // first layer: d pre / d x_k is row k of the weight matrix
                        let row = g.slice_rows(w, k, k + 1);
                        let row = g.reshape(row, &[width]);
                        let row = g.mul(row, gamma);
                        return g.mul_row(cos, row);
                    }
                    Some(t) => g.matmul(t[k], w),
                };
                let da = g.mul_row(da, gamma);
                g.mul(cos, da)
            });
            tangents = Some(next);
            h = g.sin(a);
        }
        (h, tangents.expect("at least one trunk layer"))
    }

    fn sphere_term(&self, points: &[Vec3]) -> Tensor {
        Tensor::new(&[points.len(), 1], points.iter().map(|p| norm3(*p) - self.cfg.sphere_radius).collect())
    }

    /// Signed distance `[P, 1]` from global features.
    pub fn sdf_from_features(&self, g: &mut Graph, f_g: Var, points: &[Vec3]) -> Var {
        let off = self.sdf_head.forward(g, &self.params, f_g);
        let sphere = g.constant(self.sphere_term(points));
        g.add(sphere, off)
    }

    /// Signed distance and unit surface normals at `points`.
    ///
    /// Also returns the gradient norm per point so callers can discard
    /// points whose normal is undefined.
    pub fn sdf_and_normals(&self, g: &mut Graph, codes: Var, points: &[Vec3]) -> (Var, Var, Vec<f64>) {
        let x = g.constant(points_tensor(points));
        let (f_g, t) = self.trunk_with_tangents(g, codes, x);
        let sdf = self.sdf_from_features(g, f_g, points);
        let wg = g.param(&self.params, self.sdf_head.w);
        let cols: Vec<Var> = (0..3)
            .map(|k| {
                let d = g.matmul(t[k], wg);
                let radial = Tensor::new(
                    &[points.len(), 1],
                    points.iter().map(|p| { let n = norm3(*p); if n > 0.0 { p[k] / n } else { 0.0 } }).collect(),
                );
                let radial = g.constant(radial);
                g.add(d, radial)
            })
            .collect();
        let grad = g.concat_cols(&cols);
        let sq = g.square(grad);
        let s = g.sum_cols(sq);
        let norms: Vec<f64> = g.value(s).data().iter().map(|v| v.sqrt()).collect();
        let s = g.add_scalar(s, 1e-12);
        let r = g.sqrt(s);
        let inv = g.recip(r);
        let normals = g.mul_col(grad, inv);
        (sdf, normals, norms)
    }

    /// Feature and color heads on (possibly modulated) global features.
    pub fn heads(&self, g: &mut Graph, f: Var, dirs: &[Vec3]) -> (Var, Var) {
        let v = g.constant(points_tensor(dirs));
        let inp = g.concat_cols(&[f, v]);
        let feat = self.feat_head.forward(g, &self.params, inp);
        let feat = g.leaky_relu(feat, LRELU);
        let c = self.color_head.forward(g, &self.params, feat);
        (feat, g.sigmoid(c))
    }

    /// Per-point decode without gradient tracking.
    pub fn decode_points(&self, w: &LatentCode, x: &[Vec3], v: &[Vec3]) -> Result<PointDecodeOutput> {
        self.check_code(w)?;
        if x.len() != v.len() {
            return Err(shape_err!("{} points but {} view directions", x.len(), v.len()));
        }
        if x.iter().flatten().any(|c| !c.is_finite()) {
            return Err(invalid!("points must be finite"));
        }
        let mut g = Graph::new();
        let codes = g.constant(w.codes.clone());
        let xv = g.constant(points_tensor(x));
        let f_g = self.trunk(&mut g, codes, xv);
        let sdf = self.sdf_from_features(&mut g, f_g, x);
        let (feat, color) = self.heads(&mut g, f_g, v);
        Ok(PointDecodeOutput {
            f_g: g.value(f_g).clone(),
            sdf: g.value(sdf).clone().reshape(&[x.len()]),
            feature: g.value(feat).clone(),
            color: g.value(color).clone(),
        })
    }

    /// Signed distance only, for grids and analytic comparisons.
    pub fn sdf_values(&self, w: &LatentCode, x: &[Vec3]) -> Result<Vec<f64>> {
        self.check_code(w)?;
        let mut out = Vec::with_capacity(x.len());
        for chunk in x.chunks(8192) {
            let mut g = Graph::new();
            let codes = g.constant(w.codes.clone());
            let xv = g.constant(points_tensor(chunk));
            let f_g = self.trunk(&mut g, codes, xv);
            let sdf = self.sdf_from_features(&mut g, f_g, chunk);
            out.extend_from_slice(g.value(sdf).data());
        }
        Ok(out)
    }

    /// Differentiable low-resolution render: `(rgb [3,H0,W0], feature [C,H0,W0])`.
    ///
    /// `modulate` rewrites the global features before the feature and color
    /// heads; density always comes from the unmodulated geometry.
    pub fn render_lo(
        &self,
        g: &mut Graph,
        codes: Var,
        pose: &CameraPose,
        modulate: Option<Modulator<'_>>,
    ) -> Result<(Var, Var, RenderAux)> {
        let cfg = &self.cfg;
        let res = cfg.lo_res;
        let rays = generate_rays(pose, (res, res), cfg.n_samples, cfg.bounds(), Sampling::Midpoint)?;
        let points = rays.points();
        let dirs = rays.sample_directions();
        let x = g.constant(points_tensor(&points));
        let f_g = self.trunk(g, codes, x);
        let sdf = self.sdf_from_features(g, f_g, &points);
        let alpha = self.alpha();
        let s = g.scale(sdf, -1.0 / alpha);
        let s = g.sigmoid(s);
        let sigma = g.scale(s, 1.0 / alpha);
        let n_rays = rays.n_rays();
        let sigma = g.reshape(sigma, &[n_rays, cfg.n_samples]);
        let deltas = rays.deltas();
        let weights = g.composite(sigma, &deltas);
        let f = match modulate {
            Some(m) => m(g, f_g, &points),
            None => f_g,
        };
        let (feat, color) = self.heads(g, f, &dirs);
        let rgb = g.ray_sum(weights, color);
        let feature = g.ray_sum(weights, feat);

        let (wv, tv) = crate::rendering::composite_weights(g.value(sigma).data(), deltas.data(), cfg.n_samples);
        let t = rays.sample_depths.data();
        let mut depth = vec![0.0; n_rays];
        let mut weight_sum = vec![0.0; n_rays];
        for r in 0..n_rays {
            let ws: f64 = wv[r * cfg.n_samples..(r + 1) * cfg.n_samples].iter().sum();
            weight_sum[r] = ws;
            if ws >= BACKGROUND_WEIGHT {
                depth[r] = (0..cfg.n_samples).map(|i| wv[r * cfg.n_samples + i] * t[r * cfg.n_samples + i]).sum();
            }
        }
        let bg: Vec<f64> = weight_sum
            .iter()
            .flat_map(|ws| cfg.background.iter().map(move |b| (1.0 - ws) * b))
            .collect();
        let bg = g.constant(Tensor::new(&[n_rays, 3], bg));
        let rgb = g.add(rgb, bg);
        let rgb = g.transpose(rgb);
        let rgb = g.reshape(rgb, &[3, res, res]);
        let feature = g.transpose(feature);
        let feature = g.reshape(feature, &[cfg.feature_channels, res, res]);
        let aux = RenderAux {
            transmittance: Tensor::new(&[n_rays, cfg.n_samples], tv),
            rays,
            depth,
            weight_sum,
        };
        Ok((rgb, feature, aux))
    }

    /// Differentiable super-resolution `G1(F)` with the upsampler's style codes.
    pub fn super_resolve_graph(&self, g: &mut Graph, codes: Var, feature: Var) -> Result<Var> {
        let fs = g.value(feature).shape().to_vec();
        if fs.len() != 3 || fs[0] != self.cfg.feature_channels {
            return Err(invalid!("feature map {:?} must have {} channels", fs, self.cfg.feature_channels));
        }
        let mut x = g.upsample(feature, self.cfg.upsample);
        let (h, w) = (fs[1] * self.cfg.upsample, fs[2] * self.cfg.upsample);
        let n = self.g1_convs.len();
        for (l, (&(wi, bi), style)) in self.g1_convs.iter().zip(&self.g1_styles).enumerate() {
            let in_ch = style.fan_out;
            let wl = self.style_row(g, codes, self.cfg.g0_layers + l);
            let s = style.forward(g, &self.params, wl);
            let s = g.add_scalar(s, 1.0);
            let s = g.reshape(s, &[in_ch]);
            let flat = g.reshape(x, &[in_ch, h * w]);
            let flat = g.mul_col(flat, s);
            let m = g.reshape(flat, &[in_ch, h, w]);
            let padded = g.pad_replicate(m, 1);
            let wv = g.param(&self.params, wi);
            let bv = g.param(&self.params, bi);
            let y = g.conv2d(padded, wv, Some(bv), 1, 0);
            x = if l + 1 == n { g.sigmoid(y) } else { g.leaky_relu(y, LRELU) };
        }
        Ok(x)
    }

    /// Full differentiable render.
    pub fn render_graph(
        &self,
        g: &mut Graph,
        codes: Var,
        pose: &CameraPose,
        modulate: Option<Modulator<'_>>,
    ) -> Result<(RenderVars, RenderAux)> {
        let (rgb_lo, feature, aux) = self.render_lo(g, codes, pose, modulate)?;
        let rgb_hi = self.super_resolve_graph(g, codes, feature)?;
        Ok((RenderVars { rgb_lo, feature, rgb_hi }, aux))
    }

    /// Render a latent from a pose without gradient tracking.
    pub fn render(&self, w: &LatentCode, pose: &CameraPose) -> Result<GeneratorOutput> {
        self.check_code(w)?;
        let mut g = Graph::new();
        let codes = g.constant(w.codes.clone());
        let (vars, aux) = self.render_graph(&mut g, codes, pose, None)?;
        Ok(self.collect(&g, vars, aux))
    }

    pub fn collect(&self, g: &Graph, vars: RenderVars, aux: RenderAux) -> GeneratorOutput {
        let res = self.cfg.lo_res;
        GeneratorOutput {
            lo: RenderOutput {
                rgb: g.value(vars.rgb_lo).clone(),
                feature_map: g.value(vars.feature).clone(),
                depth: Tensor::new(&[res, res], aux.depth),
                weight_sum: Tensor::new(&[res, res], aux.weight_sum),
                transmittance: aux.transmittance,
            },
            image_hi: g.value(vars.rgb_hi).clone(),
        }
    }

    /// `G1` on a fixed feature map and per-layer codes (all `L` rows; only the upsampler's are read).
    pub fn super_resolve(&self, feature: &Tensor, w: &LatentCode) -> Result<Tensor> {
        self.check_code(w)?;
        let mut g = Graph::new();
        let codes = g.constant(w.codes.clone());
        let f = g.constant(feature.clone());
        let out = self.super_resolve_graph(&mut g, codes, f)?;
        Ok(g.value(out).clone())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(GENERATOR_KIND);
        ck.metadata.insert("config".into(), serde_json::to_value(&self.cfg)?);
        ck.metadata.insert("g0_style_sites".into(), self.cfg.g0_layers.into());
        ck.metadata.insert("g1_style_sites".into(), self.cfg.g1_layers.into());
        ck.metadata.insert("frozen".into(), true.into());
        ck.insert_params(&self.params);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(GENERATOR_KIND)?;
        let cfg: GeneratorConfig = serde_json::from_value(
            ck.metadata.get("config").cloned().ok_or_else(|| Error::State("generator checkpoint has no config".into()))?,
        )?;
        let mut gen = Self::new(cfg)?;
        gen.params.load_named(&ck.tensors)?;
        Ok(gen)
    }
}

pub fn points_tensor(points: &[Vec3]) -> Tensor {
    Tensor::new(&[points.len(), 3], points.iter().flatten().copied().collect())
}

/// Small MLP critic on average-pooled images.
pub struct Discriminator {
    params: ParamSet,
    pool_to: usize,
    res: usize,
    l1: Linear,
    l2: Linear,
}

impl Discriminator {
    pub fn new(res: usize, hidden: usize, seed: u64) -> Result<Self> {
        let pool_to = res.min(8);
        if res % pool_to != 0 {
            return Err(invalid!("discriminator resolution {res} must be a multiple of {pool_to}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6469_7363);
        let mut ps = ParamSet::new("disc");
        let inp = 3 * pool_to * pool_to;
        let l1 = Linear::new(&mut ps, "l1", inp, hidden, 2f64.sqrt(), &mut rng);
        let l2 = Linear::new(&mut ps, "l2", hidden, 1, 1.0, &mut rng);
        Ok(Self { params: ps, pool_to, res, l1, l2 })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn resolution(&self) -> usize {
        self.res
    }

    fn check(&self, g: &Graph, img: Var) -> Result<()> {
        let s = g.value(img).shape();
        if s != [3, self.res, self.res] {
            return Err(shape_err!("discriminator expects [3, {r}, {r}], got {s:?}", r = self.res));
        }
        Ok(())
    }

    fn hidden(&self, g: &mut Graph, img: Var) -> (Var, Var) {
        let p = g.avg_pool(img, self.res / self.pool_to);
        let a0 = g.reshape(p, &[1, 3 * self.pool_to * self.pool_to]);
        let z1 = self.l1.forward(g, &self.params, a0);
        (z1, g.leaky_relu(z1, LRELU))
    }

    /// Realism logit `[1, 1]` of one `[3, H, W]` image.
    pub fn logit(&self, g: &mut Graph, img: Var) -> Result<Var> {
        self.check(g, img)?;
        let (_, h1) = self.hidden(g, img);
        Ok(self.l2.forward(g, &self.params, h1))
    }

    /// Logit and `|dD/dimage|²`, the latter differentiable in the critic's parameters.
    pub fn logit_and_grad_sq(&self, g: &mut Graph, img: Var) -> Result<(Var, Var)> {
        self.check(g, img)?;
        let (z1, h1) = self.hidden(g, img);
        let logit = self.l2.forward(g, &self.params, h1);
        let mask = g.value(z1).map(|z| if z > 0.0 { 1.0 } else { LRELU });
        let mask = g.constant(mask);
        let w2 = g.param(&self.params, self.l2.w);
        let w2t = g.reshape(w2, &[1, self.l2.fan_in]);
        let gz = g.mul(w2t, mask);
        let w1 = g.param(&self.params, self.l1.w);
        let ga = g.matmul_ex(gz, w1, false, true);
        // each pooled cell spreads its gradient evenly over factor² pixels
        let f = (self.res / self.pool_to) as f64;
        let sq = g.square(ga);
        let s = g.sum(sq);
        Ok((logit, g.scale(s, 1.0 / (f * f))))
    }

    /// Logits of `[3, H, W]` images without gradient tracking.
    pub fn discriminate(&self, images: &[Tensor]) -> Result<Vec<f64>> {
        images
            .iter()
            .map(|im| {
                let mut g = Graph::new();
                let x = g.constant(im.clone());
                let l = self.logit(&mut g, x)?;
                Ok(g.value(l).item())
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(DISCRIMINATOR_KIND);
        ck.metadata.insert("resolution".into(), self.res.into());
        ck.metadata.insert("hidden".into(), self.l1.fan_out.into());
        ck.insert_params(&self.params);
        ck
    }

    pub fn load(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.expect_kind(DISCRIMINATOR_KIND)?;
        self.params.load_named(&ck.tensors)
    }
}

/// Random unit vector, used by tests and the trajectory builder.
pub fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v: Vec3 = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = norm3(v);
        if n > 1e-3 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> GeneratorConfig {
        GeneratorConfig { latent_dim: 8, width: 16, feature_channels: 4, g1_hidden: 4, lo_res: 8, n_samples: 8, ..Default::default() }
    }

    #[test]
    fn latent_sampling_is_deterministic() {
        let g = Generator::new(tiny()).unwrap();
        assert_eq!(g.sample_latent(4, 0).unwrap(), g.sample_latent(4, 0).unwrap());
        assert_ne!(g.sample_latent(1, 0).unwrap(), g.sample_latent(1, 1).unwrap());
        assert!(g.sample_latent(0, 0).is_err());
    }

    #[test]
    fn z_mean_is_zero() {
        let z = sample_z(100_000, 4, 9).unwrap();
        for k in 0..4 {
            let m: f64 = z.iter().map(|r| r[k]).sum::<f64>() / z.len() as f64;
            assert!(m.abs() < 0.02, "coordinate {k}: {m}");
        }
    }

    #[test]
    fn geometry_ignores_view_direction() {
        let g = Generator::new(tiny()).unwrap();
        let w = &g.sample_latent(1, 3).unwrap()[0];
        let x = vec![[0.1, 0.2, -0.3], [0.4, 0.0, 0.1]];
        let v = vec![[0.0, 0.0, 1.0], [0.6, 0.8, 0.0]];
        let nv: Vec<Vec3> = v.iter().map(|d| [-d[0], -d[1], -d[2]]).collect();
        let a = g.decode_points(w, &x, &v).unwrap();
        let b = g.decode_points(w, &x, &nv).unwrap();
        assert_eq!(a.sdf, b.sdf);
        assert_ne!(a.color, b.color);
    }

    #[test]
    fn batched_decode_matches_loop() {
        let g = Generator::new(tiny()).unwrap();
        let w = &g.sample_latent(1, 4).unwrap()[0];
        let x: Vec<Vec3> = (0..6).map(|i| [0.1 * i as f64, -0.05 * i as f64, 0.3]).collect();
        let v = vec![[0.0, 0.0, -1.0]; 6];
        let all = g.decode_points(w, &x, &v).unwrap();
        for i in 0..6 {
            let one = g.decode_points(w, &x[i..i + 1], &v[i..i + 1]).unwrap();
            assert!((one.sdf.data()[0] - all.sdf.data()[i]).abs() < 1e-6);
            for c in 0..3 {
                assert!((one.color.data()[c] - all.color.data()[i * 3 + c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sdf_gradient_matches_finite_differences() {
        let g = Generator::new(tiny()).unwrap();
        let w = &g.sample_latent(1, 5).unwrap()[0];
        let pts = vec![[0.3, -0.2, 0.4], [-0.5, 0.1, 0.05], [0.0, 0.45, -0.2]];
        let mut gr = Graph::new();
        let codes = gr.constant(w.codes.clone());
        let (_, _, _) = g.sdf_and_normals(&mut gr, codes, &pts);
        // unnormalized gradient from the tangent path
        let x = gr.constant(points_tensor(&pts));
        let (_, t) = g.trunk_with_tangents(&mut gr, codes, x);
        let wg = gr.param(g.params(), g.sdf_head.w);
        let h = 1e-4;
        for k in 0..3 {
            let d = gr.matmul(t[k], wg);
            for (i, p) in pts.iter().enumerate() {
                let analytic = gr.value(d).data()[i] + p[k] / norm3(*p);
                let mut a = *p;
                let mut b = *p;
                a[k] += h;
                b[k] -= h;
                let s = g.sdf_values(w, &[a, b]).unwrap();
                let fd = (s[0] - s[1]) / (2.0 * h);
                assert!((analytic - fd).abs() < 1e-3, "axis {k} point {i}: {analytic} vs {fd}");
            }
        }
    }

    #[test]
    fn render_shapes_and_determinism() {
        let g = Generator::new(tiny()).unwrap();
        let w = &g.sample_latent(1, 6).unwrap()[0];
        let pose = g.config().pose(0.3, 0.1).unwrap();
        let a = g.render(w, &pose).unwrap();
        let b = g.render(w, &pose).unwrap();
        assert_eq!(a.image_hi, b.image_hi);
        assert_eq!(a.image_lo().shape(), &[3, 8, 8]);
        assert_eq!(a.image_hi.shape(), &[3, 16, 16]);
        assert!(a.image_hi.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let c = g.render(w, &g.config().pose(0.3 + 2.0 * std::f64::consts::PI, 0.1).unwrap()).unwrap();
        for (x, y) in a.image_hi.data().iter().zip(c.image_hi.data()) {
            assert!((x - y).abs() < 1e-9);
        }
        let ws = a.lo.weight_sum.data();
        assert!(ws.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        for (d, s) in a.lo.depth.data().iter().zip(ws) {
            if *s >= BACKGROUND_WEIGHT {
                assert!(*d > 0.0);
            } else {
                assert_eq!(*d, 0.0);
            }
        }
    }

    #[test]
    fn super_resolution_of_zero_features_is_constant() {
        let g = Generator::new(tiny()).unwrap();
        let zero = LatentCode { codes: Tensor::zeros(&[g.config().n_styles(), 8]) };
        let out = g.super_resolve(&Tensor::zeros(&[4, 8, 8]), &zero).unwrap();
        assert_eq!(out.shape(), &[3, 16, 16]);
        for c in 0..3 {
            let plane = &out.data()[c * 256..(c + 1) * 256];
            assert!(plane.iter().all(|&v| v == plane[0]));
        }
        assert!(g.super_resolve(&Tensor::zeros(&[3, 8, 8]), &zero).is_err());
    }

    #[test]
    fn discriminator_gradient_penalty_matches_finite_differences() {
        let d = Discriminator::new(16, 8, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::from_fn(&[3, 16, 16], |_| rng.random_range(0.0..1.0));
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let (_, sq) = d.logit_and_grad_sq(&mut g, x).unwrap();
        let h = 1e-5;
        let mut fd_sq = 0.0;
        for i in 0..img.len() {
            let mut a = img.clone();
            let mut b = img.clone();
            a.data_mut()[i] += h;
            b.data_mut()[i] -= h;
            let la = d.discriminate(&[a]).unwrap()[0];
            let lb = d.discriminate(&[b]).unwrap()[0];
            fd_sq += ((la - lb) / (2.0 * h)).powi(2);
        }
        let an = g.value(sq).item();
        assert!((an - fd_sq).abs() / fd_sq.max(1e-12) < 1e-3, "{an} vs {fd_sq}");
    }

    #[test]
    fn discriminator_shapes() {
        let d = Discriminator::new(16, 8, 1).unwrap();
        let ims = vec![Tensor::full(&[3, 16, 16], 0.5); 3];
        let l = d.discriminate(&ims).unwrap();
        assert_eq!(l.len(), 3);
        assert!(l.iter().all(|v| v.is_finite() && *v == l[0]));
        assert!(d.discriminate(&[Tensor::zeros(&[3, 8, 8])]).is_err());
    }
}
