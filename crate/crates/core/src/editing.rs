//! Latent edit directions found by linear classification in W space.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::generator::{Generator, LatentCode};
use crate::rendering::CameraPose;

/// Deterministic attribute score of a latent code.
pub trait AttributeOracle {
    fn name(&self) -> &str;
    fn score(&self, w: &LatentCode) -> Result<f64>;
}

/// `tanh(v · (w̄ - c))` with `w̄` the mean code over layers.
#[derive(Clone, Debug)]
pub struct PlantedLinear {
    pub v: Vec<f64>,
    pub center: Vec<f64>,
}

fn mean_code(w: &LatentCode) -> Vec<f64> {
    let (l, d) = (w.n_layers(), w.dim());
    (0..d).map(|k| (0..l).map(|i| w.layer(i)[k]).sum::<f64>() / l as f64).collect()
}

impl AttributeOracle for PlantedLinear {
    fn name(&self) -> &str {
        "planted"
    }

    fn score(&self, w: &LatentCode) -> Result<f64> {
        let m = mean_code(w);
        if m.len() != self.v.len() {
            return Err(shape_err!("oracle direction has {} entries, code has {}", self.v.len(), m.len()));
        }
        Ok(m.iter().zip(&self.v).zip(&self.center).map(|((a, v), c)| v * (a - c)).sum::<f64>().tanh())
    }
}

/// Mean brightness of the low-resolution render from a fixed pose.
pub struct MeanLuminance<'a> {
    pub generator: &'a Generator,
    pub pose: CameraPose,
}

impl AttributeOracle for MeanLuminance<'_> {
    fn name(&self) -> &str {
        "luminance"
    }

    fn score(&self, w: &LatentCode) -> Result<f64> {
        Ok(self.generator.render(w, &self.pose)?.lo.rgb.mean())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginStats {
    pub train_accuracy: f64,
    /// Std of sample projections onto the direction; the natural edit step.
    pub projection_std: f64,
    pub bias: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditDirection {
    pub attribute: String,
    /// Unit vector in W space.
    pub direction: Vec<f64>,
    /// Style sites the edit applies to; `None` edits every layer.
    pub layer_mask: Option<Vec<bool>>,
    pub margin: MarginStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub n_samples: usize,
    pub l2: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { n_samples: 2000, l2: 1e-5, max_iterations: 100, seed: 99 }
    }
}

/// L2-penalized logistic regression by Newton's method.
///
/// Minimizes `mean log-loss + l2/2 |β|²` (intercept unpenalized) and returns
/// `(weights, intercept)`.
pub fn logistic_regression(x: &[Vec<f64>], y: &[bool], l2: f64, max_iterations: usize) -> Result<(Vec<f64>, f64)> {
    let n = x.len();
    if n == 0 || y.len() != n {
        return Err(invalid!("need matching non-empty features and labels"));
    }
    let d = x[0].len();
    let p = d + 1;
    let xm = DMatrix::from_fn(n, p, |i, j| if j < d { x[i][j] } else { 1.0 });
    let yv = DVector::from_fn(n, |i, _| if y[i] { 1.0 } else { 0.0 });
    let mut beta = DVector::zeros(p);
    let mut reg = DMatrix::identity(p, p) * l2;
    reg[(d, d)] = 1e-12;
    for _ in 0..max_iterations {
        let z = &xm * &beta;
        let mu = z.map(crate::autograd::sigmoid);
        let grad = xm.transpose() * (&mu - &yv) / n as f64 + &reg * &beta;
        let s = mu.map(|m| m * (1.0 - m));
        let xs = DMatrix::from_fn(n, p, |i, j| xm[(i, j)] * s[i]);
        let hess = xm.transpose() * xs / n as f64 + &reg;
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::Numerical("logistic Hessian is not positive definite".into()))?
            .solve(&grad);
        beta -= &step;
        if step.norm() < 1e-10 * (1.0 + beta.norm()) {
            break;
        }
    }
    Ok((beta.rows(0, d).iter().copied().collect(), beta[d]))
}

/// Sample latents, binarize oracle scores at the median and fit a linear
/// boundary; the direction is its unit normal, oriented towards higher scores.
pub fn search_direction(gen: &Generator, oracle: &dyn AttributeOracle, cfg: &SearchConfig) -> Result<EditDirection> {
    let latents = gen.sample_latent(cfg.n_samples, cfg.seed)?;
    let feats: Vec<Vec<f64>> = latents.iter().map(mean_code).collect();
    let scores: Vec<f64> = latents.iter().map(|w| oracle.score(w)).collect::<Result<_>>()?;
    let mut sorted = scores.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = sorted[sorted.len() / 2];
    let labels: Vec<bool> = scores.iter().map(|&s| s >= median).collect();
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() || sorted[0] == sorted[sorted.len() - 1] {
        return Err(Error::Degenerate(format!("oracle {} gives a single class", oracle.name())));
    }
    // centre and scale the features so the penalty treats every axis alike
    let d = feats[0].len();
    let n = feats.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| feats.iter().map(|f| f[k]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|k| (feats.iter().map(|f| (f[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt().max(1e-12))
        .collect();
    let z: Vec<Vec<f64>> = feats.iter().map(|f| (0..d).map(|k| (f[k] - mean[k]) / std[k]).collect()).collect();
    let (beta, b0) = logistic_regression(&z, &labels, cfg.l2, cfg.max_iterations)?;
    let raw: Vec<f64> = (0..d).map(|k| beta[k] / std[k]).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Degenerate("classifier found no separating direction".into()));
    }
    let direction: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    let correct = z
        .iter()
        .zip(&labels)
        .filter(|(zi, &l)| (zi.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + b0 >= 0.0) == l)
        .count();
    let proj: Vec<f64> = feats.iter().map(|f| f.iter().zip(&direction).map(|(a, b)| a * b).sum()).collect();
    let pm = proj.iter().sum::<f64>() / n;
    let projection_std = (proj.iter().map(|p| (p - pm).powi(2)).sum::<f64>() / n).sqrt();
    let bias = b0 - (0..d).map(|k| beta[k] * mean[k] / std[k]).sum::<f64>();
    Ok(EditDirection {
        attribute: oracle.name().to_string(),
        direction,
        layer_mask: None,
        margin: MarginStats { train_accuracy: correct as f64 / n, projection_std, bias: bias / norm, threshold: median },
    })
}

/// `ŵ + strength · direction` on every style site selected by the mask.
pub fn apply_edit(w: &LatentCode, dir: &EditDirection, strength: f64) -> Result<LatentCode> {
    if dir.direction.len() != w.dim() {
        return Err(shape_err!("direction has {} entries, codes have {}", dir.direction.len(), w.dim()));
    }
    if let Some(m) = &dir.layer_mask {
        if m.len() != w.n_layers() {
            return Err(shape_err!("layer mask has {} entries, code has {} layers", m.len(), w.n_layers()));
        }
    }
    let d = w.dim();
    let mut codes = w.codes.clone();
    for (i, v) in codes.data_mut().iter_mut().enumerate() {
        let layer = i / d;
        if dir.layer_mask.as_ref().is_none_or(|m| m[layer]) {
            *v += strength * dir.direction[i % d];
        }
    }
    LatentCode::from_tensor(codes)
}

/// Named directions persisted as JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectionCatalog {
    pub directions: BTreeMap<String, EditDirection>,
}

impl DirectionCatalog {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&EditDirection> {
        self.directions.get(name).ok_or_else(|| {
            let known: Vec<&str> = self.directions.keys().map(String::as_str).collect();
            invalid!("unknown edit direction {name:?}; catalog has {known:?}")
        })
    }
}

/// Parse `name:strength`.
pub fn parse_edit_spec(spec: &str) -> Result<(String, f64)> {
    let (name, s) = spec.rsplit_once(':').ok_or_else(|| invalid!("edit must look like name:strength, got {spec:?}"))?;
    let strength: f64 = s.parse().map_err(|_| invalid!("bad edit strength {s:?}"))?;
    if name.is_empty() || !strength.is_finite() {
        return Err(invalid!("edit must look like name:strength, got {spec:?}"));
    }
    Ok((name.to_string(), strength))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;

    fn gen() -> Generator {
        Generator::new(GeneratorConfig { latent_dim: 8, width: 16, lo_res: 8, feature_channels: 4, ..Default::default() }).unwrap()
    }

    #[test]
    fn logistic_recovers_planted_boundary() {
        let x: Vec<Vec<f64>> = (0..400).map(|i| vec![((i * 37) % 101) as f64 / 50.0 - 1.0, ((i * 53) % 97) as f64 / 48.0 - 1.0]).collect();
        let y: Vec<bool> = x.iter().map(|p| 2.0 * p[0] - p[1] > 0.1).collect();
        let (b, _) = logistic_regression(&x, &y, 1e-3, 100).unwrap();
        let cos = (2.0 * b[0] - b[1]) / (5f64.sqrt() * (b[0] * b[0] + b[1] * b[1]).sqrt());
        assert!(cos > 0.99, "{cos}");
    }

    #[test]
    fn edits_are_affine_in_strength() {
        let g = gen();
        let w = g.sample_latent(1, 3).unwrap().remove(0);
        let dir = EditDirection {
            attribute: "x".into(),
            direction: vec![0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0],
            layer_mask: None,
            margin: MarginStats { train_accuracy: 1.0, projection_std: 1.0, bias: 0.0, threshold: 0.0 },
        };
        assert_eq!(apply_edit(&w, &dir, 0.0).unwrap(), w);
        let a = apply_edit(&apply_edit(&w, &dir, 0.7).unwrap(), &dir, -0.2).unwrap();
        let b = apply_edit(&w, &dir, 0.5).unwrap();
        assert!(a.codes.zip_map(&b.codes, |x, y| x - y).max_abs() < 1e-12);
        let back = apply_edit(&apply_edit(&w, &dir, 0.5).unwrap(), &dir, -0.5).unwrap();
        assert!(back.codes.zip_map(&w.codes, |x, y| x - y).max_abs() < 1e-12);
        let masked = EditDirection { layer_mask: Some(vec![true; w.n_layers() - 1].into_iter().chain([false]).collect()), ..dir };
        let e = apply_edit(&w, &masked, 1.0).unwrap();
        assert_eq!(e.layer(w.n_layers() - 1), w.layer(w.n_layers() - 1));
    }

    #[test]
    fn constant_oracle_is_degenerate() {
        struct Flat;
        impl AttributeOracle for Flat {
            fn name(&self) -> &str {
                "flat"
            }
            fn score(&self, _: &LatentCode) -> Result<f64> {
                Ok(1.0)
            }
        }
        let cfg = SearchConfig { n_samples: 50, ..Default::default() };
        assert!(matches!(search_direction(&gen(), &Flat, &cfg), Err(Error::Degenerate(_))));
    }

    #[test]
    fn edit_spec_parsing() {
        assert_eq!(parse_edit_spec("smile:1.5").unwrap(), ("smile".to_string(), 1.5));
        assert_eq!(parse_edit_spec("a:b:-2").unwrap(), ("a:b".to_string(), -2.0));
        assert!(parse_edit_spec("smile").is_err());
        assert!(parse_edit_spec(":1").is_err());
    }

    #[test]
    fn catalog_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = DirectionCatalog::default();
        let g = gen();
        let oracle = PlantedLinear { v: vec![1.0; 8], center: g.w_avg().to_vec() };
        let d = search_direction(&g, &oracle, &SearchConfig { n_samples: 200, ..Default::default() }).unwrap();
        c.directions.insert("planted".into(), d);
        let p = dir.path().join("cat.json");
        c.save(&p).unwrap();
        assert_eq!(DirectionCatalog::load(&p).unwrap(), c);
        assert!(c.get("nope").is_err());
    }
}
