//! Training objectives.
//!
//! Every norm uses mean reduction: `L2(a, b) = sqrt(mean((a - b)²))` and
//! L1 terms are mean absolute differences. The perceptual and similarity
//! terms use fixed, randomly initialized networks as stand-ins for
//! pretrained LPIPS and identity embeddings; only their structure (a feature
//! distance and a cosine similarity) carries over.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{normal_tensor, Conv2d, ParamSet};
use crate::rendering::Vec3;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// `lambda_g1`: surface distance.
    pub geo_surface: f64,
    /// `lambda_g2`: surface normals.
    pub geo_normal: f64,
    /// `lambda_g3`: free-space distance.
    pub geo_free: f64,
    pub l2: f64,
    pub perceptual: f64,
    pub similarity: f64,
    pub adv: f64,
    pub disc: f64,
    pub r1: f64,
    pub ada: f64,
    /// Penalize critic gradients on real images (otherwise on reconstructions).
    pub r1_on_real: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            geo_surface: 1.0,
            geo_normal: 1.0,
            geo_free: 1.0,
            l2: 1.0,
            perceptual: 0.8,
            similarity: 0.1,
            adv: 0.01,
            disc: 0.01,
            r1: 10.0,
            ada: 0.1,
            r1_on_real: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.geo_surface,
            self.geo_normal,
            self.geo_free,
            self.l2,
            self.perceptual,
            self.similarity,
            self.adv,
            self.disc,
            self.r1,
            self.ada,
        ];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

fn check_same(g: &Graph, a: Var, b: &Tensor) -> Result<()> {
    if g.value(a).shape() != b.shape() {
        return Err(shape_err!("prediction {:?} vs target {:?}", g.value(a).shape(), b.shape()));
    }
    Ok(())
}

/// `sqrt(mean((a - b)²))`.
pub fn l2(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let sq = g.square(d);
    let m = g.mean(sq);
    g.sqrt(m)
}

/// Mean absolute difference.
pub fn l1(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let ab = g.abs(d);
    g.mean(ab)
}

/// Predicted geometry at the descriptor's points.
#[derive(Clone, Copy, Debug)]
pub struct GeometryPrediction {
    /// `[N_O, 1]`
    pub sdf_on: Var,
    /// `[N_O, 3]`
    pub normals_on: Var,
    /// `[N_F, 1]`
    pub sdf_free: Var,
}

/// `(L_geo^O, L_geo^F)`; either is a zero constant for an empty point set.
///
/// Normals flagged invalid contribute nothing to the surface term but still
/// count in its mean.
pub fn geometry_loss(
    g: &mut Graph,
    pred: GeometryPrediction,
    normals: &[Vec3],
    normal_valid: &[bool],
    sdf_free: &[f64],
    w: &LossWeights,
) -> Result<(Var, Var)> {
    let n_on = g.value(pred.sdf_on).len();
    let n_free = g.value(pred.sdf_free).len();
    if normals.len() != n_on || normal_valid.len() != n_on || g.value(pred.normals_on).len() != 3 * n_on {
        return Err(shape_err!("surface prediction has {n_on} points, targets {}", normals.len()));
    }
    if sdf_free.len() != n_free {
        return Err(shape_err!("free prediction has {n_free} points, targets {}", sdf_free.len()));
    }
    let lo = if n_on == 0 {
        g.constant(Tensor::scalar(0.0))
    } else {
        let ab = g.abs(pred.sdf_on);
        let dist = g.mean(ab);
        let dist = g.scale(dist, w.geo_surface);
        let target = g.constant(Tensor::new(&[n_on, 3], normals.iter().flatten().copied().collect()));
        let diff = g.sub(pred.normals_on, target);
        let diff = g.abs(diff);
        let per_point = g.sum_cols(diff);
        let mask = g.constant(Tensor::new(&[n_on], normal_valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()));
        let masked = g.mul(per_point, mask);
        let nl = g.mean(masked);
        let nl = g.scale(nl, w.geo_normal);
        g.add(dist, nl)
    };
    let lf = if n_free == 0 {
        g.constant(Tensor::scalar(0.0))
    } else {
        let t = g.constant(Tensor::new(&[n_free, 1], sdf_free.to_vec()));
        let d = l1(g, pred.sdf_free, t);
        g.scale(d, w.geo_free)
    };
    Ok((lo, lf))
}

/// Mean over layers of `|w_hat_l - w_l|_2`.
pub fn code_loss(g: &mut Graph, w_hat: Var, w: &Tensor) -> Result<Var> {
    check_same(g, w_hat, w)?;
    let t = g.constant(w.clone());
    let d = g.sub(w_hat, t);
    let sq = g.square(d);
    let per_layer = g.sum_cols(sq);
    let norms = g.sqrt(per_layer);
    Ok(g.mean(norms))
}

/// Fixed random convolutional feature extractor.
pub struct PerceptualProxy {
    params: ParamSet,
    convs: Vec<Conv2d>,
}

impl PerceptualProxy {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c70_6970);
        let mut ps = ParamSet::new("perceptual");
        let convs = vec![
            Conv2d::new(&mut ps, "c0", 3, 8, 3, 1, 2f64.sqrt(), &mut rng),
            Conv2d::new(&mut ps, "c1", 8, 8, 3, 2, 2f64.sqrt(), &mut rng),
        ];
        ps.set_frozen(true);
        Self { params: ps, convs }
    }

    fn features(&self, g: &mut Graph, img: Var) -> Vec<Var> {
        let mut x = img;
        let mut out = Vec::new();
        for c in &self.convs {
            let y = c.forward(g, &self.params, x);
            x = g.leaky_relu(y, 0.2);
            out.push(x);
        }
        out
    }

    /// Mean over extractor levels of the RMS feature difference.
    pub fn distance(&self, g: &mut Graph, a: Var, b: Var) -> Var {
        let fa = self.features(g, a);
        let fb = self.features(g, b);
        let terms: Vec<Var> = fa.iter().zip(&fb).map(|(x, y)| l2(g, *x, *y)).collect();
        let s = g.sum_vars(&terms);
        g.scale(s, 1.0 / terms.len() as f64)
    }
}

/// Fixed random projection of a pooled, centred image.
pub struct SimilarityProxy {
    projection: Tensor,
    pooled: usize,
}

impl SimilarityProxy {
    pub fn new(seed: u64) -> Self {
        let pooled = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7369_6d69);
        let inp = 3 * pooled * pooled;
        Self { projection: normal_tensor(&mut rng, &[inp, 32], 1.0 / (inp as f64).sqrt()), pooled }
    }

    fn embed(&self, g: &mut Graph, img: Var) -> Var {
        let s = g.value(img).shape().to_vec();
        let f = (s[1] / self.pooled).max(1);
        let p = g.avg_pool(img, f);
        let n = g.value(p).len();
        let flat = g.reshape(p, &[1, n]);
        let c = g.add_scalar(flat, -0.5);
        let proj = g.constant(self.projection.clone());
        g.matmul(c, proj)
    }

    /// Cosine similarity of the two embeddings.
    pub fn cosine(&self, g: &mut Graph, a: Var, b: Var) -> Var {
        let ea = self.embed(g, a);
        let eb = self.embed(g, b);
        let ab = g.mul(ea, eb);
        let dot = g.sum(ab);
        let sa = g.square(ea);
        let na = g.sum(sa);
        let sb = g.square(eb);
        let nb = g.sum(sb);
        let den = g.mul(na, nb);
        let den = g.add_scalar(den, 1e-12);
        let den = g.sqrt(den);
        g.div(dot, den)
    }
}

/// Both fixed proxy networks.
pub struct Proxies {
    pub perceptual: PerceptualProxy,
    pub similarity: SimilarityProxy,
}

impl Proxies {
    pub fn new(seed: u64) -> Self {
        Self { perceptual: PerceptualProxy::new(seed), similarity: SimilarityProxy::new(seed) }
    }

    /// Perceptual distance between two `[3, H, W]` images (no gradients).
    pub fn perceptual_distance(&self, a: &Tensor, b: &Tensor) -> f64 {
        let mut g = Graph::new();
        let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
        let d = self.perceptual.distance(&mut g, x, y);
        g.value(d).item()
    }

    pub fn similarity(&self, a: &Tensor, b: &Tensor) -> f64 {
        let mut g = Graph::new();
        let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
        let d = self.similarity.cosine(&mut g, x, y);
        g.value(d).item()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Reconstruction {
    pub total: Var,
    pub l2: f64,
    pub perceptual: f64,
    pub similarity: f64,
}

/// `l2 * L2 + perceptual * L_perc + similarity * (1 - cos)`.
pub fn reconstruction_loss(g: &mut Graph, pred: Var, target: &Tensor, w: &LossWeights, proxies: &Proxies) -> Result<Reconstruction> {
    check_same(g, pred, target)?;
    let t = g.constant(target.clone());
    let a = l2(g, pred, t);
    let p = proxies.perceptual.distance(g, pred, t);
    let c = proxies.similarity.cosine(g, pred, t);
    let one_minus = g.scale(c, -1.0);
    let s = g.add_scalar(one_minus, 1.0);
    let (va, vp, vs) = (g.value(a).item(), g.value(p).item(), g.value(s).item());
    let a = g.scale(a, w.l2);
    let p = g.scale(p, w.perceptual);
    let s = g.scale(s, w.similarity);
    let total = g.sum_vars(&[a, p, s]);
    Ok(Reconstruction { total, l2: va, perceptual: vp, similarity: vs })
}

fn check_logits(g: &Graph, logits: &[Var]) -> Result<()> {
    for l in logits {
        let v = g.value(*l);
        if !v.all_finite() {
            return Err(Error::Numerical(format!("critic produced non-finite logit {:?}", v.data())));
        }
    }
    Ok(())
}

/// Non-saturating generator-side loss `mean softplus(-D(fake))`, unweighted.
pub fn adversarial_loss(g: &mut Graph, fake_logits: &[Var]) -> Result<Var> {
    check_logits(g, fake_logits)?;
    let terms: Vec<Var> = fake_logits
        .iter()
        .map(|l| {
            let n = g.scale(*l, -1.0);
            let s = g.softplus(n);
            g.sum(s)
        })
        .collect();
    let s = g.sum_vars(&terms);
    Ok(g.scale(s, 1.0 / terms.len() as f64))
}

/// Critic loss `mean softplus(-D(real)) + mean softplus(D(fake))`, unweighted.
pub fn discriminator_loss(g: &mut Graph, real_logits: &[Var], fake_logits: &[Var]) -> Result<Var> {
    check_logits(g, real_logits)?;
    check_logits(g, fake_logits)?;
    let real = adversarial_loss(g, real_logits)?;
    let fake: Vec<Var> = fake_logits
        .iter()
        .map(|l| {
            let s = g.softplus(*l);
            g.sum(s)
        })
        .collect();
    let f = g.sum_vars(&fake);
    let f = g.scale(f, 1.0 / fake.len() as f64);
    Ok(g.add(real, f))
}

/// Mean of squared critic input-gradient norms, unweighted.
pub fn r1_penalty(g: &mut Graph, grad_sq: &[Var]) -> Var {
    let s = g.sum_vars(grad_sq);
    g.scale(s, 1.0 / grad_sq.len() as f64)
}

/// `ada * mean |delta_hat - (hi - up(lo))|`.
pub fn ada_residual_loss(g: &mut Graph, delta_hat: Var, hi: &Tensor, lo: &Tensor, w: &LossWeights) -> Result<Var> {
    check_same(g, delta_hat, hi)?;
    if lo.ndim() != 3 || lo.dim(0) != hi.dim(0) || hi.dim(1) % lo.dim(1) != 0 {
        return Err(shape_err!("low-resolution image {:?} does not divide {:?}", lo.shape(), hi.shape()));
    }
    let target = hi.zip_map(&upsample_nearest(lo, hi.dim(1) / lo.dim(1)), |a, b| a - b);
    let t = g.constant(target);
    let d = l1(g, delta_hat, t);
    Ok(g.scale(d, w.ada))
}

pub fn upsample_nearest(img: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    let (ho, wo) = (h * factor, w * factor);
    let d = img.data();
    Tensor::from_fn(&[c, ho, wo], |i| {
        let ch = i / (ho * wo);
        let y = (i / wo) % ho;
        let x = i % wo;
        d[(ch * h + y / factor) * w + x / factor]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_reference_weights() {
        let w = LossWeights::default();
        assert_eq!((w.l2, w.perceptual, w.similarity), (1.0, 0.8, 0.1));
        assert_eq!((w.adv, w.disc, w.r1), (0.01, 0.01, 10.0));
        assert_eq!(w.ada, 0.1);
    }

    #[test]
    fn geometry_hand_case() {
        let mut g = Graph::new();
        let w = LossWeights::default();
        let pred = GeometryPrediction {
            sdf_on: g.input(Tensor::new(&[2, 1], vec![0.1, -0.1])),
            normals_on: g.input(Tensor::new(&[2, 3], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0])),
            sdf_free: g.input(Tensor::new(&[1, 1], vec![0.3])),
        };
        let (lo, lf) = geometry_loss(&mut g, pred, &[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]], &[true, true], &[0.3], &w).unwrap();
        assert!((g.value(lo).item() - 0.1).abs() < 1e-15);
        assert_eq!(g.value(lf).item(), 0.0);
        let empty = GeometryPrediction {
            sdf_on: g.input(Tensor::zeros(&[0, 1])),
            normals_on: g.input(Tensor::zeros(&[0, 3])),
            sdf_free: g.input(Tensor::zeros(&[0, 1])),
        };
        let (lo, lf) = geometry_loss(&mut g, empty, &[], &[], &[], &w).unwrap();
        assert_eq!((g.value(lo).item(), g.value(lf).item()), (0.0, 0.0));
    }

    #[test]
    fn code_loss_cases() {
        let w = Tensor::from_fn(&[4, 3], |i| i as f64 * 0.1);
        let mut g = Graph::new();
        let same = g.input(w.clone());
        let l = code_loss(&mut g, same, &w).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let mut off = w.clone();
        off.data_mut()[5] += 1.0;
        let v = g.input(off.clone());
        let l = code_loss(&mut g, v, &w).unwrap();
        assert!((g.value(l).item() - 0.25).abs() < 1e-15);
        let v = g.input(w.clone());
        let r = code_loss(&mut g, v, &off).unwrap();
        assert_eq!(g.value(r).item(), 0.25);
    }

    #[test]
    fn reconstruction_of_target_is_zero_and_l2_is_homogeneous() {
        let p = Proxies::new(0);
        let w = LossWeights::default();
        let img = Tensor::from_fn(&[3, 8, 8], |i| ((i * 7) % 11) as f64 / 11.0);
        let mut g = Graph::new();
        let v = g.input(img.clone());
        let r = reconstruction_loss(&mut g, v, &img, &w, &p).unwrap();
        assert!(r.l2 == 0.0 && r.perceptual == 0.0);
        assert!(r.similarity.abs() < 1e-12);
        let shifted = img.map(|x| x + 0.05);
        let doubled = img.map(|x| x + 0.1);
        let a = reconstruction_loss(&mut g, v, &shifted, &w, &p).unwrap().l2;
        let b = reconstruction_loss(&mut g, v, &doubled, &w, &p).unwrap().l2;
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn adversarial_closed_forms() {
        let mut g = Graph::new();
        let z = g.input(Tensor::new(&[1, 1], vec![0.0]));
        let l = adversarial_loss(&mut g, &[z]).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
        let d = discriminator_loss(&mut g, &[z], &[z]).unwrap();
        assert!((g.value(d).item() - 2.0 * 2f64.ln()).abs() < 1e-15);
        let zero = g.input(Tensor::scalar(0.0));
        let r = r1_penalty(&mut g, &[zero]);
        assert_eq!(g.value(r).item(), 0.0);
        let bad = g.input(Tensor::new(&[1, 1], vec![f64::NAN]));
        assert!(adversarial_loss(&mut g, &[bad]).is_err());
    }

    #[test]
    fn ada_residual_cases() {
        let w = LossWeights::default();
        let lo = Tensor::from_fn(&[3, 2, 2], |i| i as f64 * 0.05);
        let hi = Tensor::from_fn(&[3, 4, 4], |i| (i % 5) as f64 * 0.1);
        let truth = hi.zip_map(&upsample_nearest(&lo, 2), |a, b| a - b);
        let mut g = Graph::new();
        let v = g.input(truth.clone());
        let l = ada_residual_loss(&mut g, v, &hi, &lo, &w).unwrap();
        assert!(g.value(l).item().abs() < 1e-15);
        let v = g.input(truth.map(|x| x + 0.3));
        let l = ada_residual_loss(&mut g, v, &hi, &lo, &w).unwrap();
        assert!((g.value(l).item() - 0.03).abs() < 1e-12);
    }
}
