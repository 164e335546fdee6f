//! FiLM modulation and the inversion pipeline that fuses global, local and
//! 2D-aligned features before volume integration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::editing::{apply_edit, EditDirection};
use crate::encoders::{sample_local_feature, AdaModule, EncoderConfig, GlobalEncoder, LocalEncoder, Module};
use crate::error::{shape_err, Error, Result};
use crate::eval::InversionModel;
use crate::generator::{Generator, LatentCode, RenderAux, RenderVars};
use crate::nn::{Linear, ParamSet};
use crate::rendering::{CameraPose, Vec3};
use crate::tensor::Tensor;

const LRELU: f64 = 0.2;

pub const FILM_KIND: &str = "film";

/// Conditioning vector to `(γ, β)` through an input layer and two residual
/// MLP blocks. Starts at `γ = 1, β = 0`.
pub struct FiLMLayer {
    params: ParamSet,
    input: Linear,
    blocks: [(Linear, Linear); 2],
    gamma: Linear,
    beta: Linear,
}

impl FiLMLayer {
    pub fn new(name: &str, cond_width: usize, target_width: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new(name);
        let input = Linear::new(&mut ps, "input", cond_width, hidden, 2f64.sqrt(), &mut rng);
        let blocks = [0, 1].map(|b| {
            (
                Linear::new(&mut ps, &format!("block{b}.a"), hidden, hidden, 2f64.sqrt(), &mut rng),
                Linear::new(&mut ps, &format!("block{b}.b"), hidden, hidden, 0.5, &mut rng),
            )
        });
        let gamma = Linear::constant(&mut ps, "gamma", hidden, target_width, 0.0, 1.0);
        let beta = Linear::constant(&mut ps, "beta", hidden, target_width, 0.0, 0.0);
        Self { params: ps, input, blocks, gamma, beta }
    }

    pub fn cond_width(&self) -> usize {
        self.input.fan_in
    }

    pub fn target_width(&self) -> usize {
        self.gamma.fan_out
    }

    /// Overwrite the output heads so that `γ ≡ gamma` and `β ≡ beta` regardless of the condition.
    pub fn force(&mut self, gamma: f64, beta: f64) {
        for (head, v) in [(self.gamma, gamma), (self.beta, beta)] {
            self.params.value_mut(head.w).data_mut().fill(0.0);
            self.params.value_mut(head.b).data_mut().fill(v);
        }
    }

    /// `(γ, β)`, each `[P, target_width]`, for a `[P, cond_width]` condition.
    pub fn scale_shift(&self, g: &mut Graph, cond: Var) -> (Var, Var) {
        let mut h = self.input.forward(g, &self.params, cond);
        h = g.leaky_relu(h, LRELU);
        for (a, b) in &self.blocks {
            let r = a.forward(g, &self.params, h);
            let r = g.leaky_relu(r, LRELU);
            let r = b.forward(g, &self.params, r);
            h = g.add(h, r);
        }
        let gamma = self.gamma.forward(g, &self.params, h);
        let beta = self.beta.forward(g, &self.params, h);
        (gamma, beta)
    }

    /// `γ(cond) ⊙ target + β(cond)`; widths must already be checked.
    fn apply(&self, g: &mut Graph, target: Var, cond: Var) -> Var {
        let (gamma, beta) = self.scale_shift(g, cond);
        let m = g.mul(gamma, target);
        g.add(m, beta)
    }
}

impl Module for FiLMLayer {
    fn kind(&self) -> &'static str {
        FILM_KIND
    }
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// `FiLM(target, condition) = γ(condition) ⊙ target + β(condition)`.
pub fn film_modulate(g: &mut Graph, target: Var, condition: Var, layer: &FiLMLayer) -> Result<Var> {
    let (ts, cs) = (g.value(target).shape().to_vec(), g.value(condition).shape().to_vec());
    if ts.len() != 2 || cs.len() != 2 || ts[0] != cs[0] {
        return Err(shape_err!("FiLM target {ts:?} and condition {cs:?} must be [P, C] with equal P"));
    }
    if ts[1] != layer.target_width() || cs[1] != layer.cond_width() {
        return Err(shape_err!(
            "FiLM layer maps width {} to {}, got condition {} and target {}",
            layer.cond_width(),
            layer.target_width(),
            cs[1],
            ts[1]
        ));
    }
    Ok(layer.apply(g, target, condition))
}

/// Source-view local branch: `E_l` plus one FiLM on the global features.
pub struct LocalBranch {
    pub encoder: LocalEncoder,
    pub film: FiLMLayer,
}

/// Novel-view branch: `E_ADA` plus the inner and outer FiLM layers.
pub struct HybridBranch {
    pub ada: AdaModule,
    pub inner: FiLMLayer,
    pub outer: FiLMLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// `G(ŵ)` only.
    Global,
    /// One FiLM conditioned on source-view local features.
    Local,
    /// Chained FiLMs over 3D-projected and 2D-aligned local features.
    Hybrid,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Global => "global",
            FusionMode::Local => "local",
            FusionMode::Hybrid => "hybrid",
        }
    }
}

/// Renderer outputs at one pose without gradient tracking: the conditioning
/// image and depth map fed to the local branches.
#[derive(Clone, Debug)]
pub struct ViewRender {
    pub pose: CameraPose,
    pub image_lo: Tensor,
    pub image_hi: Tensor,
    /// `[H0, W0]` expected termination depth.
    pub depth: Tensor,
}

/// Encoder outputs for one source image.
#[derive(Clone, Debug)]
pub struct Inversion {
    pub w: LatentCode,
    pub source: Tensor,
    pub source_view: ViewRender,
    /// `I - Ĩ` at high resolution.
    pub delta: Tensor,
}

pub struct Pipeline {
    pub generator: Generator,
    pub encoder_config: EncoderConfig,
    pub global: GlobalEncoder,
    pub local: Option<LocalBranch>,
    pub hybrid: Option<HybridBranch>,
}

/// Per-point scratch for modulators: point features are re-derived in each
/// render from the current local feature maps.
struct LocalMaps {
    f_l: Var,
    pose_l: CameraPose,
    f_ada: Option<(Var, CameraPose)>,
}

impl Pipeline {
    pub fn new(generator: Generator, encoder_config: EncoderConfig) -> Result<Self> {
        let global = GlobalEncoder::new(&encoder_config, generator.config(), generator.w_avg())?;
        Ok(Self { generator, encoder_config, global, local: None, hybrid: None })
    }

    pub fn new_local_branch(&self) -> Result<LocalBranch> {
        let cfg = &self.encoder_config;
        Ok(LocalBranch {
            encoder: LocalEncoder::new(cfg, self.generator.config())?,
            film: FiLMLayer::new("film", cfg.local_feature_width(), self.generator.config().width, cfg.local_channels, cfg.seed ^ 0x66),
        })
    }

    /// Fresh hybrid branch; the outer FiLM starts from the trained source-view FiLM.
    pub fn new_hybrid_branch(&self) -> Result<HybridBranch> {
        let cfg = &self.encoder_config;
        let fw = cfg.local_feature_width();
        let mut outer = FiLMLayer::new("film_outer", fw, self.generator.config().width, cfg.local_channels, cfg.seed ^ 0x66);
        if let Some(l) = &self.local {
            for i in 0..outer.params().len() {
                *outer.params_mut().value_mut(i) = l.film.params().value(i).clone();
            }
        }
        Ok(HybridBranch {
            ada: AdaModule::new(cfg, self.generator.config())?,
            inner: FiLMLayer::new("film_inner", fw, fw, cfg.local_channels, cfg.seed ^ 0x69),
            outer,
        })
    }

    pub fn supports(&self, mode: FusionMode) -> bool {
        match mode {
            FusionMode::Global => true,
            FusionMode::Local => self.local.is_some(),
            FusionMode::Hybrid => self.local.is_some() && self.hybrid.is_some(),
        }
    }

    fn require(&self, mode: FusionMode) -> Result<()> {
        if self.supports(mode) {
            Ok(())
        } else {
            Err(Error::State(format!("{} reconstruction needs the corresponding stage to be trained", mode.as_str())))
        }
    }

    pub fn view(&self, w: &LatentCode, pose: &CameraPose) -> Result<ViewRender> {
        let out = self.generator.render(w, pose)?;
        Ok(ViewRender { pose: *pose, image_lo: out.lo.rgb, image_hi: out.image_hi, depth: out.lo.depth })
    }

    pub fn invert(&self, image: &Tensor, pose: &CameraPose) -> Result<Inversion> {
        let w = self.global.encode(image)?;
        let source_view = self.view(&w, pose)?;
        let delta = image.zip_map(&source_view.image_hi, |a, b| a - b);
        Ok(Inversion { w, source: image.clone(), source_view, delta })
    }

    fn render_with(&self, g: &mut Graph, codes: Var, query: &CameraPose, maps: Option<LocalMaps>, mode: FusionMode) -> Result<(RenderVars, RenderAux)> {
        let Some(maps) = maps else {
            return self.generator.render_graph(g, codes, query, None);
        };
        let pe = self.encoder_config.pe_frequencies;
        let local = self.local.as_ref().expect("local branch checked by caller");
        let hybrid = self.hybrid.as_ref();
        let mut modulate = |g: &mut Graph, f_g: Var, points: &[Vec3]| -> Var {
            let f_l = sample_local_feature(g, maps.f_l, points, &maps.pose_l, pe);
            match (mode, maps.f_ada, hybrid) {
                (FusionMode::Hybrid, Some((f_ada, pose_ada)), Some(h)) => {
                    let f_a = sample_local_feature(g, f_ada, points, &pose_ada, pe);
                    let fused = h.inner.apply(g, f_l, f_a);
                    h.outer.apply(g, f_g, fused)
                }
                _ => local.film.apply(g, f_g, f_l),
            }
        };
        self.generator.render_graph(g, codes, query, Some(&mut modulate))
    }

    /// Stage-II path: local features from the source view modulate `f_G` at any query pose.
    pub fn source_view_graph(&self, g: &mut Graph, codes: Var, inv: &Inversion, query: &CameraPose) -> Result<(RenderVars, RenderAux)> {
        self.require(FusionMode::Local)?;
        let local = self.local.as_ref().expect("checked");
        let delta = g.constant(inv.delta.clone());
        let f_l = local.encoder.forward(g, delta, &inv.source_view.depth)?;
        let maps = LocalMaps { f_l, pose_l: inv.source_view.pose, f_ada: None };
        self.render_with(g, codes, query, Some(maps), FusionMode::Local)
    }

    /// Hybrid path. `source_cond` is the render the source residual is
    /// aligned to for 3D projection (the source pose, possibly edited);
    /// `query_cond` is the render at the query pose.
    ///
    /// Returns the render and the aligned query-view residual `Δ′`.
    pub fn hybrid_graph(
        &self,
        g: &mut Graph,
        codes: Var,
        delta: &Tensor,
        source_cond: &ViewRender,
        query_cond: &ViewRender,
    ) -> Result<(RenderVars, RenderAux, Var)> {
        self.require(FusionMode::Hybrid)?;
        let local = self.local.as_ref().expect("checked");
        let hybrid = self.hybrid.as_ref().expect("checked");
        let d = g.constant(delta.clone());
        let c_src = g.constant(source_cond.image_lo.clone());
        let d_src = hybrid.ada.forward(g, d, c_src)?;
        let f_l = local.encoder.forward(g, d_src, &source_cond.depth)?;
        let c_q = g.constant(query_cond.image_lo.clone());
        let d_q = hybrid.ada.forward(g, d, c_q)?;
        let f_ada = local.encoder.forward(g, d_q, &query_cond.depth)?;
        let maps = LocalMaps { f_l, pose_l: source_cond.pose, f_ada: Some((f_ada, query_cond.pose)) };
        let (vars, aux) = self.render_with(g, codes, &query_cond.pose, Some(maps), FusionMode::Hybrid)?;
        Ok((vars, aux, d_q))
    }

    /// Reconstruction of the inverted object at `query` without gradients.
    pub fn reconstruct(&self, inv: &Inversion, query: &CameraPose, mode: FusionMode) -> Result<Tensor> {
        self.require(mode)?;
        let mut g = Graph::new();
        let codes = g.constant(inv.w.codes.clone());
        let vars = match mode {
            FusionMode::Global => self.generator.render_graph(&mut g, codes, query, None)?.0,
            FusionMode::Local => self.source_view_graph(&mut g, codes, inv, query)?.0,
            FusionMode::Hybrid => {
                let qv = if *query == inv.source_view.pose { inv.source_view.clone() } else { self.view(&inv.w, query)? };
                self.hybrid_graph(&mut g, codes, &inv.delta, &inv.source_view, &qv)?.0
            }
        };
        Ok(g.value(vars.rgb_hi).clone())
    }

    /// Edited novel view: `ŵ_edit = ŵ + strength · direction`, the source
    /// residual aligned to the edited source render for projection and to the
    /// edited query render for the 2D branch.
    pub fn editing_forward(&self, inv: &Inversion, direction: &EditDirection, strength: f64, query: &CameraPose) -> Result<(LatentCode, Tensor)> {
        self.require(FusionMode::Hybrid)?;
        let w_edit = apply_edit(&inv.w, direction, strength)?;
        let src = if strength == 0.0 { inv.source_view.clone() } else { self.view(&w_edit, &inv.source_view.pose)? };
        let qv = if *query == src.pose { src.clone() } else { self.view(&w_edit, query)? };
        let mut g = Graph::new();
        let codes = g.constant(w_edit.codes.clone());
        let (vars, _, _) = self.hybrid_graph(&mut g, codes, &inv.delta, &src, &qv)?;
        Ok((w_edit, g.value(vars.rgb_hi).clone()))
    }

    /// Force every FiLM layer to the identity modulation.
    pub fn force_identity(&mut self) {
        if let Some(l) = &mut self.local {
            l.film.force(1.0, 0.0);
        }
        if let Some(h) = &mut self.hybrid {
            h.inner.force(1.0, 0.0);
            h.outer.force(1.0, 0.0);
        }
    }
}

/// A pipeline evaluated in one fusion mode.
pub struct PipelineModel<'a> {
    pub pipeline: &'a Pipeline,
    pub mode: FusionMode,
}

impl InversionModel for PipelineModel<'_> {
    fn name(&self) -> &str {
        self.mode.as_str()
    }

    fn reconstruct(&self, source: &Tensor, source_pose: &CameraPose, targets: &[CameraPose]) -> Result<Vec<Tensor>> {
        let inv = self.pipeline.invert(source, source_pose)?;
        targets.iter().map(|t| self.pipeline.reconstruct(&inv, t, self.mode)).collect()
    }
}
