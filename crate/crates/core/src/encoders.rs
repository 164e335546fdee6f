//! Trainable networks: the global inversion encoder, the local hourglass
//! encoder and the 2D residual alignment module.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{invalid, shape_err, Error, Result};
use crate::generator::{GeneratorConfig, LatentCode};
use crate::nn::{Conv2d, Linear, ParamSet};
use crate::rendering::{positional_encode, positional_encoding_width, project_to_image, CameraPose, Vec3};
use crate::tensor::Tensor;

const LRELU: f64 = 0.2;

pub const GLOBAL_ENCODER_KIND: &str = "global_encoder";
pub const LOCAL_ENCODER_KIND: &str = "local_encoder";
pub const ADA_KIND: &str = "ada";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Channels of the four stride-2 levels of the global pyramid.
    pub pyramid_channels: [usize; 4],
    /// Width `C_L` of the local feature map.
    pub local_channels: usize,
    pub local_hidden: usize,
    pub hourglass_stacks: usize,
    pub hourglass_depth: usize,
    pub pe_frequencies: usize,
    pub ada_hidden: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            pyramid_channels: [16, 32, 32, 32],
            local_channels: 32,
            local_hidden: 32,
            hourglass_stacks: 2,
            hourglass_depth: 2,
            pe_frequencies: 4,
            ada_hidden: 16,
            seed: 7,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, gen: &GeneratorConfig) -> Result<()> {
        if self.pyramid_channels.contains(&0) || self.local_channels == 0 || self.local_hidden == 0 || self.ada_hidden == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.hourglass_stacks == 0 || self.hourglass_depth == 0 {
            return Err(Error::Config("hourglass needs at least one stack and one level".into()));
        }
        let hi = gen.hi_res();
        if hi % 32 != 0 {
            return Err(Error::Config(format!("global encoder needs a hi-res size divisible by 32, got {hi}")));
        }
        if gen.lo_res % (1 << self.hourglass_depth) != 0 {
            return Err(Error::Config(format!(
                "lo_res {} must be divisible by 2^hourglass_depth = {}",
                gen.lo_res,
                1 << self.hourglass_depth
            )));
        }
        Ok(())
    }

    /// Width of a sampled local feature: `C_L` plus the positional encoding.
    pub fn local_feature_width(&self) -> usize {
        self.local_channels + positional_encoding_width(self.pe_frequencies)
    }
}

/// Serialization of any network's parameters into the checkpoint container.
pub trait Module {
    fn kind(&self) -> &'static str;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.kind());
        ck.insert_params(self.params());
        ck
    }

    fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.expect_kind(self.kind())?;
        self.params_mut().load_named(&ck.tensors)
    }
}

fn conv_act(g: &mut Graph, ps: &ParamSet, c: &Conv2d, x: Var) -> Var {
    let y = c.forward(g, ps, x);
    g.leaky_relu(y, LRELU)
}

/// Channel concatenation of `[C_i, H, W]` maps.
pub fn concat_channels(g: &mut Graph, xs: &[Var]) -> Var {
    let s = g.value(xs[0]).shape().to_vec();
    let (h, w) = (s[1], s[2]);
    let flat: Vec<Var> = xs
        .iter()
        .map(|&x| {
            let c = g.value(x).dim(0);
            g.reshape(x, &[c, h * w])
        })
        .collect();
    let cat = g.concat_rows(&flat);
    let c = g.value(cat).dim(0);
    g.reshape(cat, &[c, h, w])
}

/// Which pyramid level feeds each per-layer code head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadLevel {
    /// Early trunk layers, which control geometry.
    Coarse,
    /// Later trunk layers, which control texture.
    Middle,
    /// Upsampler layers.
    Fine,
}

/// Image to per-layer latent codes `ŵ`, predicted as offsets from `w_avg`.
pub struct GlobalEncoder {
    params: ParamSet,
    convs: Vec<Conv2d>,
    heads: Vec<(HeadLevel, Linear)>,
    w_avg: Tensor,
    res: usize,
}

impl GlobalEncoder {
    pub fn new(cfg: &EncoderConfig, gen: &GeneratorConfig, w_avg: &[f64]) -> Result<Self> {
        cfg.validate(gen)?;
        if w_avg.len() != gen.latent_dim {
            return Err(shape_err!("w_avg has {} entries, latent_dim is {}", w_avg.len(), gen.latent_dim));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x676c_6f62);
        let mut ps = ParamSet::new("enc_g");
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (l, &c) in cfg.pyramid_channels.iter().enumerate() {
            convs.push(Conv2d::new(&mut ps, &format!("level{l}"), c_in, c, 3, 2, 2f64.sqrt(), &mut rng));
            c_in = c;
        }
        let mut heads = Vec::new();
        for (l, level) in Self::routing(gen).into_iter().enumerate() {
            let c = cfg.pyramid_channels[Self::level_index(level)];
            heads.push((level, Linear::new(&mut ps, &format!("head{l}"), 4 * c, gen.latent_dim, 1.0, &mut rng)));
        }
        Ok(Self { params: ps, convs, heads, w_avg: Tensor::new(&[1, w_avg.len()], w_avg.to_vec()), res: gen.hi_res() })
    }

    /// Head assignment for every style site of the generator.
    pub fn routing(gen: &GeneratorConfig) -> Vec<HeadLevel> {
        let n_geo = gen.g0_layers.div_ceil(2);
        (0..gen.n_styles())
            .map(|l| {
                if l < n_geo {
                    HeadLevel::Coarse
                } else if l < gen.g0_layers {
                    HeadLevel::Middle
                } else {
                    HeadLevel::Fine
                }
            })
            .collect()
    }

    fn level_index(level: HeadLevel) -> usize {
        match level {
            HeadLevel::Fine => 1,
            HeadLevel::Middle => 2,
            HeadLevel::Coarse => 3,
        }
    }

    pub fn resolution(&self) -> usize {
        self.res
    }

    pub fn n_codes(&self) -> usize {
        self.heads.len()
    }

    /// Feature maps at 1/2, 1/4, 1/8 and 1/16 of the input resolution.
    pub fn pyramid(&self, g: &mut Graph, img: Var) -> Result<Vec<Var>> {
        let s = g.value(img).shape();
        if s != [3, self.res, self.res] {
            return Err(invalid!("global encoder expects a [3, {0}, {0}] image, got {s:?}", self.res));
        }
        let mut x = g.add_scalar(img, -0.5);
        let mut levels = Vec::new();
        for c in &self.convs {
            x = conv_act(g, &self.params, c, x);
            levels.push(x);
        }
        Ok(levels)
    }

    /// Codes `[L, D]` from pyramid levels.
    pub fn codes_from_levels(&self, g: &mut Graph, levels: &[Var]) -> Var {
        let pooled: Vec<Var> = [1, 2, 3]
            .iter()
            .map(|&i| {
                let v = levels[i];
                let s = g.value(v).dim(1);
                let p = if s > 2 { g.avg_pool(v, s / 2) } else { v };
                let n = g.value(p).len();
                g.reshape(p, &[1, n])
            })
            .collect();
        let w_avg = g.constant(self.w_avg.clone());
        let rows: Vec<Var> = self
            .heads
            .iter()
            .map(|(level, head)| {
                let x = pooled[Self::level_index(*level) - 1];
                let off = head.forward(g, &self.params, x);
                g.add(off, w_avg)
            })
            .collect();
        g.concat_rows(&rows)
    }

    pub fn forward(&self, g: &mut Graph, img: Var) -> Result<Var> {
        let levels = self.pyramid(g, img)?;
        Ok(self.codes_from_levels(g, &levels))
    }

    pub fn encode(&self, img: &Tensor) -> Result<LatentCode> {
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let w = self.forward(&mut g, x)?;
        LatentCode::from_tensor(g.value(w).clone())
    }

    pub fn encode_batch(&self, images: &[Tensor]) -> Result<Vec<LatentCode>> {
        images.iter().map(|im| self.encode(im)).collect()
    }
}

impl Module for GlobalEncoder {
    fn kind(&self) -> &'static str {
        GLOBAL_ENCODER_KIND
    }
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn new(ps: &mut ParamSet, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: Conv2d::new(ps, &format!("{name}.a"), c, c, 3, 1, 2f64.sqrt(), rng),
            b: Conv2d::new(ps, &format!("{name}.b"), c, c, 3, 1, 0.5, rng),
        }
    }

    fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Var {
        let h = conv_act(g, ps, &self.a, x);
        let h = self.b.forward(g, ps, h);
        g.add(x, h)
    }
}

struct Hourglass {
    skip: ResBlock,
    down: ResBlock,
    inner: Option<Box<Hourglass>>,
    bottom: Option<ResBlock>,
    up: ResBlock,
}

impl Hourglass {
    fn new(ps: &mut ParamSet, name: &str, c: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        let skip = ResBlock::new(ps, &format!("{name}.skip"), c, rng);
        let down = ResBlock::new(ps, &format!("{name}.down"), c, rng);
        let (inner, bottom) = if depth > 1 {
            (Some(Box::new(Hourglass::new(ps, &format!("{name}.inner"), c, depth - 1, rng))), None)
        } else {
            (None, Some(ResBlock::new(ps, &format!("{name}.bottom"), c, rng)))
        };
        let up = ResBlock::new(ps, &format!("{name}.up"), c, rng);
        Self { skip, down, inner, bottom, up }
    }

    fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Var {
        let s = self.skip.forward(g, ps, x);
        let low = g.avg_pool(x, 2);
        let low = self.down.forward(g, ps, low);
        let low = match (&self.inner, &self.bottom) {
            (Some(h), _) => h.forward(g, ps, low),
            (None, Some(b)) => b.forward(g, ps, low),
            _ => unreachable!("hourglass level has an inner module or a bottom block"),
        };
        let low = self.up.forward(g, ps, low);
        let up = g.upsample(low, 2);
        g.add(s, up)
    }
}

/// Stacked hourglass from `(Δ, depth)` to a pixel-aligned feature map `F_L`.
pub struct LocalEncoder {
    params: ParamSet,
    delta_in: Conv2d,
    stem: Conv2d,
    stacks: Vec<(Hourglass, Conv2d)>,
    out: Conv2d,
    lo_res: usize,
    hi_res: usize,
    depth_scale: f64,
    pe_frequencies: usize,
}

impl LocalEncoder {
    pub fn new(cfg: &EncoderConfig, gen: &GeneratorConfig) -> Result<Self> {
        cfg.validate(gen)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6c6f_6361);
        let mut ps = ParamSet::new("enc_l");
        let h = cfg.local_hidden;
        let delta_in = Conv2d::new(&mut ps, "delta_in", 3, h, 3, gen.upsample, 2f64.sqrt(), &mut rng);
        let stem = Conv2d::new(&mut ps, "stem", h + 1, h, 3, 1, 2f64.sqrt(), &mut rng);
        let stacks = (0..cfg.hourglass_stacks)
            .map(|s| {
                (
                    Hourglass::new(&mut ps, &format!("hg{s}"), h, cfg.hourglass_depth, &mut rng),
                    Conv2d::new(&mut ps, &format!("hg{s}.merge"), h, h, 1, 1, 0.5, &mut rng),
                )
            })
            .collect();
        let out = Conv2d::new(&mut ps, "out", h, cfg.local_channels, 1, 1, 1.0, &mut rng);
        Ok(Self {
            params: ps,
            delta_in,
            stem,
            stacks,
            out,
            lo_res: gen.lo_res,
            hi_res: gen.hi_res(),
            depth_scale: 1.0 / gen.camera_radius,
            pe_frequencies: cfg.pe_frequencies,
        })
    }

    pub fn channels(&self) -> usize {
        self.out.out_ch
    }

    pub fn pe_frequencies(&self) -> usize {
        self.pe_frequencies
    }

    /// `delta` is `[3, H1, W1]`, `depth` is the renderer's `[H0, W0]` depth map.
    pub fn forward(&self, g: &mut Graph, delta: Var, depth: &Tensor) -> Result<Var> {
        let ds = g.value(delta).shape();
        if ds != [3, self.hi_res, self.hi_res] {
            return Err(shape_err!("residual must be [3, {0}, {0}], got {ds:?}", self.hi_res));
        }
        if depth.len() != self.lo_res * self.lo_res {
            return Err(shape_err!("depth map must be {0}x{0}, got {1:?}", self.lo_res, depth.shape()));
        }
        let d = conv_act(g, &self.params, &self.delta_in, delta);
        let t = g.constant(depth.map(|v| v * self.depth_scale).reshape(&[1, self.lo_res, self.lo_res]));
        let x = concat_channels(g, &[d, t]);
        let mut x = conv_act(g, &self.params, &self.stem, x);
        for (hg, merge) in &self.stacks {
            let y = hg.forward(g, &self.params, x);
            let y = g.leaky_relu(y, LRELU);
            let y = merge.forward(g, &self.params, y);
            x = g.add(x, y);
        }
        Ok(self.out.forward(g, &self.params, x))
    }

    pub fn encode(&self, delta: &Tensor, depth: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let d = g.constant(delta.clone());
        let f = self.forward(&mut g, d, depth)?;
        Ok(g.value(f).clone())
    }
}

impl Module for LocalEncoder {
    fn kind(&self) -> &'static str {
        LOCAL_ENCODER_KIND
    }
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// Pixel-aligned features `F_L(π(x)) ⊕ PE(x)` as `[P, C_L + PE]`.
///
/// Points projecting outside the map get zero interpolated features.
pub fn sample_local_feature(g: &mut Graph, f_l: Var, points: &[Vec3], pose: &CameraPose, pe_frequencies: usize) -> Var {
    let s = g.value(f_l).shape().to_vec();
    let proj = project_to_image(points, pose, (s[1], s[2]));
    let interp = g.grid_sample(f_l, &proj.uv, &proj.valid);
    let pe = g.constant(positional_encode(points, pe_frequencies));
    g.concat_cols(&[interp, pe])
}

/// `(Δ, conditioning image)` to an aligned residual of the same shape.
///
/// Residual form with a zero-initialized output layer, so an untrained module
/// passes `Δ` through unchanged.
pub struct AdaModule {
    params: ParamSet,
    convs: Vec<Conv2d>,
    hi_res: usize,
}

impl AdaModule {
    pub fn new(cfg: &EncoderConfig, gen: &GeneratorConfig) -> Result<Self> {
        cfg.validate(gen)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6164_6121);
        let mut ps = ParamSet::new("ada");
        let h = cfg.ada_hidden;
        let mut convs = vec![Conv2d::new(&mut ps, "conv0", 6, h, 3, 1, 2f64.sqrt(), &mut rng)];
        for l in 1..4 {
            convs.push(Conv2d::new(&mut ps, &format!("conv{l}"), h, h, 3, 1, 2f64.sqrt(), &mut rng));
        }
        let last = Conv2d::new(&mut ps, "conv4", h, 3, 3, 1, 1.0, &mut rng);
        *ps.value_mut(last.w) = Tensor::zeros(&[3, h, 3, 3]);
        convs.push(last);
        Ok(Self { params: ps, convs, hi_res: gen.hi_res() })
    }

    /// `cond` may be at any resolution dividing the residual's; it is
    /// upsampled to match.
    pub fn forward(&self, g: &mut Graph, delta: Var, cond: Var) -> Result<Var> {
        let ds = g.value(delta).shape().to_vec();
        let cs = g.value(cond).shape().to_vec();
        if ds != [3, self.hi_res, self.hi_res] {
            return Err(shape_err!("residual must be [3, {0}, {0}], got {ds:?}", self.hi_res));
        }
        if cs.len() != 3 || cs[0] != 3 || cs[1] == 0 || ds[1] % cs[1] != 0 || cs[1] != cs[2] {
            return Err(shape_err!("conditioning image {cs:?} does not align with residual {ds:?}"));
        }
        let cond = if cs[1] == ds[1] { cond } else { g.upsample(cond, ds[1] / cs[1]) };
        let c = g.add_scalar(cond, -0.5);
        let mut x = concat_channels(g, &[delta, c]);
        let n = self.convs.len();
        for (l, conv) in self.convs.iter().enumerate() {
            x = if l + 1 == n { conv.forward(g, &self.params, x) } else { conv_act(g, &self.params, conv, x) };
        }
        Ok(g.add(delta, x))
    }

    pub fn align(&self, delta: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let d = g.constant(delta.clone());
        let c = g.constant(cond.clone());
        let out = self.forward(&mut g, d, c)?;
        Ok(g.value(out).clone())
    }
}

impl Module for AdaModule {
    fn kind(&self) -> &'static str {
        ADA_KIND
    }
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (EncoderConfig, GeneratorConfig) {
        let gen = GeneratorConfig { lo_res: 16, latent_dim: 8, g0_layers: 3, g1_layers: 2, ..Default::default() };
        let enc = EncoderConfig { local_channels: 8, local_hidden: 8, pyramid_channels: [4, 8, 8, 8], ada_hidden: 4, ..Default::default() };
        (enc, gen)
    }

    fn image(res: usize, k: usize) -> Tensor {
        Tensor::from_fn(&[3, res, res], |i| ((i * 7 + k * 13) % 23) as f64 / 23.0)
    }

    #[test]
    fn global_code_count_and_routing() {
        let (enc, gen) = small();
        let e = GlobalEncoder::new(&enc, &gen, &vec![0.1; 8]).unwrap();
        let w = e.encode(&image(32, 0)).unwrap();
        assert_eq!((w.n_layers(), w.dim()), (gen.n_styles(), 8));
        assert_eq!(
            GlobalEncoder::routing(&gen),
            vec![HeadLevel::Coarse, HeadLevel::Coarse, HeadLevel::Middle, HeadLevel::Fine, HeadLevel::Fine]
        );
        assert!(e.encode(&image(16, 0)).is_err());
    }

    #[test]
    fn geometry_codes_ignore_finer_levels() {
        let (enc, gen) = small();
        let e = GlobalEncoder::new(&enc, &gen, &vec![0.0; 8]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(image(32, 1));
        let levels = e.pyramid(&mut g, x).unwrap();
        let full = e.codes_from_levels(&mut g, &levels);
        let mut zeroed = levels.clone();
        for l in zeroed.iter_mut().take(3) {
            let s = g.value(*l).shape().to_vec();
            *l = g.constant(Tensor::zeros(&s));
        }
        let part = e.codes_from_levels(&mut g, &zeroed);
        let (a, b) = (g.value(full), g.value(part));
        let d = gen.latent_dim;
        assert_eq!(&a.data()[..2 * d], &b.data()[..2 * d]);
        assert_ne!(&a.data()[2 * d..], &b.data()[2 * d..]);
    }

    #[test]
    fn batched_encoding_matches_loop() {
        let (enc, gen) = small();
        let e = GlobalEncoder::new(&enc, &gen, &vec![0.0; 8]).unwrap();
        let imgs: Vec<Tensor> = (0..3).map(|k| image(32, k)).collect();
        let batch = e.encode_batch(&imgs).unwrap();
        for (im, w) in imgs.iter().zip(&batch) {
            assert!(e.encode(im).unwrap().codes.zip_map(&w.codes, |a, b| a - b).max_abs() < 1e-6);
        }
    }

    #[test]
    fn local_encoder_shape_and_determinism() {
        let (enc, gen) = small();
        let e = LocalEncoder::new(&enc, &gen).unwrap();
        let zero = Tensor::zeros(&[3, 32, 32]);
        let depth = Tensor::zeros(&[16, 16]);
        let a = e.encode(&zero, &depth).unwrap();
        assert_eq!(a.shape(), &[8, 16, 16]);
        assert_eq!(a, e.encode(&zero, &depth).unwrap());
        assert!(e.encode(&zero, &Tensor::zeros(&[8, 8])).is_err());
    }

    #[test]
    fn local_feature_sampling_rules() {
        let (enc, gen) = small();
        let pose = gen.pose(0.3, 0.1).unwrap();
        let fmap = Tensor::from_fn(&[8, 16, 16], |i| i as f64 * 0.01);
        let rays = crate::rendering::generate_rays(&pose, (16, 16), 4, gen.bounds(), crate::rendering::Sampling::Midpoint).unwrap();
        let pts = rays.points();
        let mut g = Graph::new();
        let f = g.constant(fmap.clone());
        // samples 0 and 1 of pixel (2, 5) lie on the same ray through its centre
        let ray = 2 * 16 + 5;
        let sel = [pts[ray * 4], pts[ray * 4 + 1]];
        let s = sample_local_feature(&mut g, f, &sel, &pose, enc.pe_frequencies);
        let v = g.value(s);
        assert_eq!(v.dim(1), enc.local_feature_width());
        for c in 0..8 {
            let expect = fmap.data()[c * 256 + ray];
            assert!((v.data()[c] - expect).abs() < 1e-9);
            assert!((v.data()[v.dim(1) + c] - expect).abs() < 1e-9);
        }
        assert_ne!(&v.data()[8..v.dim(1)], &v.data()[v.dim(1) + 8..]);
    }

    #[test]
    fn out_of_bounds_projection_gives_zero_features() {
        let (_, gen) = small();
        let pose = gen.pose(0.0, 0.0).unwrap();
        // a point at normalized u = 1.5 on the image plane at depth 1
        let th = pose.tan_half_fov();
        let f = pose.frame();
        let p = crate::rendering::add3(
            crate::rendering::add3(f.origin, f.forward),
            crate::rendering::scale3(f.right, 1.5 * th),
        );
        let mut g = Graph::new();
        let fm = g.constant(Tensor::ones(&[8, 16, 16]));
        let s = sample_local_feature(&mut g, fm, &[p], &pose, 2);
        assert!(g.value(s).data()[..8].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ada_starts_as_identity() {
        let (enc, gen) = small();
        let a = AdaModule::new(&enc, &gen).unwrap();
        let delta = image(32, 3).map(|v| v - 0.5);
        let out = a.align(&delta, &image(16, 4)).unwrap();
        assert_eq!(out, delta);
        assert!(a.align(&delta, &image(12, 4)).is_err());
    }
}
