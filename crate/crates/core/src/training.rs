//! Three-stage encoder training against the frozen generator.
//!
//! Every step draws fresh samples from an RNG seeded by `seed ^ step`, so a
//! resumed run reproduces the losses of an uninterrupted one.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{synthesize, PoseDistribution, SynthesisConfig, TrainingSample};
use crate::encoders::Module;
use crate::error::{invalid, Error, Result};
use crate::eval::mse;
use crate::fusion::{FusionMode, Pipeline};
use crate::generator::{Discriminator, Generator, LatentCode};
use crate::losses::{
    adversarial_loss, ada_residual_loss, code_loss, discriminator_loss, geometry_loss, r1_penalty, reconstruction_loss,
    GeometryPrediction, LossWeights, Proxies,
};
use crate::nn::{Adam, ParamSet};
use crate::rendering::CameraPose;
use crate::tensor::Tensor;

pub const DEFAULT_LEARNING_RATE: f64 = 5e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
    III,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::I => "stage1",
            Stage::II => "stage2",
            Stage::III => "stage3",
        }
    }
}

/// Piecewise-linear ramp from 0 at step 0 to 1 at `ramp_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub ramp_steps: usize,
}

impl CurriculumSchedule {
    pub fn alpha(&self, step: usize) -> f64 {
        if self.ramp_steps == 0 {
            return 1.0;
        }
        (step as f64 / self.ramp_steps as f64).min(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    /// Steps over which the pose spread ramps up (stage III only).
    pub curriculum_ramp: usize,
    /// Also update the local encoder (stage III only).
    pub train_local: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            checkpoint_every: 500,
            eval_every: 500,
            curriculum_ramp: 1000,
            train_local: false,
        }
    }
}

impl StageConfig {
    pub fn curriculum(&self) -> CurriculumSchedule {
        CurriculumSchedule { ramp_steps: self.curriculum_ramp }
    }

    pub fn validate(&self, stage: Stage) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{}.batch_size must be positive", stage.as_str())));
        }
        if stage == Stage::III && self.batch_size % 2 != 0 {
            return Err(invalid!("stage III pairs views of the same latent, so batch_size must be even (got {})", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("{}.learning_rate must be positive", stage.as_str())));
        }
        if self.curriculum_ramp > self.iterations.max(1) && stage == Stage::III {
            return Err(Error::Config("stage3.curriculum_ramp must not exceed the iteration count".into()));
        }
        Ok(())
    }

    /// Modules whose weights must not change during this stage.
    pub fn frozen_modules(&self, stage: Stage) -> Vec<&'static str> {
        match stage {
            Stage::I => vec!["generator"],
            Stage::II => vec!["generator", "global_encoder"],
            Stage::III if self.train_local => vec!["generator", "global_encoder"],
            Stage::III => vec!["generator", "global_encoder", "local_encoder"],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub weights: LossWeights,
    pub synthesis: SynthesisConfig,
    pub held_out: usize,
    pub held_out_seed: u64,
    pub discriminator_hidden: usize,
    /// Critic update period in steps.
    pub discriminator_every: usize,
    pub proxy_seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            stage1: StageConfig { seed: 1, ..Default::default() },
            stage2: StageConfig { seed: 2, ..Default::default() },
            stage3: StageConfig { seed: 3, ..Default::default() },
            weights: LossWeights::default(),
            synthesis: SynthesisConfig::default(),
            held_out: 32,
            held_out_seed: 0x4845_4c44,
            discriminator_hidden: 32,
            discriminator_every: 2,
            proxy_seed: 11,
        }
    }
}

impl TrainingConfig {
    pub fn stage(&self, s: Stage) -> &StageConfig {
        match s {
            Stage::I => &self.stage1,
            Stage::II => &self.stage2,
            Stage::III => &self.stage3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in [Stage::I, Stage::II, Stage::III] {
            self.stage(s).validate(s)?;
        }
        self.weights.validate()?;
        self.synthesis.poses.validate()?;
        if self.discriminator_every == 0 {
            return Err(Error::Config("discriminator_every must be positive".into()));
        }
        Ok(())
    }
}

/// Named loss components of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub values: Vec<(&'static str, f64)>,
}

impl StepLog {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: Stage,
    pub start_step: usize,
    pub logs: Vec<StepLog>,
    pub evals: Vec<EvalPoint>,
    pub checkpoint: Option<PathBuf>,
    /// Frozen module name and its weight checksum, verified unchanged.
    pub frozen_checksums: Vec<(String, String)>,
}

/// Where a stage writes its checkpoint and logs.
#[derive(Clone, Debug, Default)]
pub struct TrainContext {
    pub dir: Option<PathBuf>,
    pub resume: bool,
    pub verbose: bool,
    /// Stop after this many completed steps (for tests of resumption).
    pub stop_after: Option<usize>,
}

impl TrainContext {
    pub fn in_dir(dir: &Path) -> Self {
        Self { dir: Some(dir.to_path_buf()), ..Default::default() }
    }

    pub fn checkpoint_path(&self, stage: Stage) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}.ckpt", stage.as_str())))
    }
}

/// Held-out renders: a source view and a second view of each latent.
#[derive(Clone, Debug)]
pub struct HeldOutSample {
    pub latent: LatentCode,
    pub pose: CameraPose,
    pub image_hi: Tensor,
    pub novel_pose: CameraPose,
    pub novel_hi: Tensor,
}

pub fn held_out_set(gen: &Generator, n: usize, poses: &PoseDistribution, seed: u64) -> Result<Vec<HeldOutSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gc = gen.config();
    let latents = gen.sample_latent(n, rng.random())?;
    latents
        .into_iter()
        .map(|latent| {
            let pose = poses.sample(&mut rng, gc.fov, gc.camera_radius)?;
            let novel_pose = poses.sample(&mut rng, gc.fov, gc.camera_radius)?;
            let image_hi = gen.render(&latent, &pose)?.image_hi;
            let novel_hi = gen.render(&latent, &novel_pose)?.image_hi;
            Ok(HeldOutSample { latent, pose, image_hi, novel_pose, novel_hi })
        })
        .collect()
}

/// Mean code loss of the global encoder over held-out samples.
pub fn held_out_code_loss(p: &Pipeline, held: &[HeldOutSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in held {
        let w = p.global.encode(&s.image_hi)?;
        let mut g = Graph::new();
        let wv = g.constant(w.codes);
        let l = code_loss(&mut g, wv, &s.latent.codes)?;
        total += g.value(l).item();
    }
    Ok(total / held.len() as f64)
}

/// Mean high-resolution MSE in the given fusion mode, at the source or second view.
pub fn held_out_mse(p: &Pipeline, held: &[HeldOutSample], mode: FusionMode, novel: bool) -> Result<f64> {
    let mut total = 0.0;
    for s in held {
        let inv = p.invert(&s.image_hi, &s.pose)?;
        let (q, target) = if novel { (&s.novel_pose, &s.novel_hi) } else { (&s.pose, &s.image_hi) };
        total += mse(&p.reconstruct(&inv, q, mode)?, target)?;
    }
    Ok(total / held.len() as f64)
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Optimizer bound to one parameter set.
struct Trainable {
    adam: Adam,
}

impl Trainable {
    fn new(ps: &ParamSet, lr: f64) -> Self {
        Self { adam: Adam::new(ps, lr) }
    }

    fn step(&mut self, g: &Graph, grads: &crate::autograd::Grads, ps: &mut ParamSet) {
        let pg = g.param_grads(grads, ps);
        self.adam.step(ps, &pg);
    }
}

struct Critic {
    disc: Discriminator,
    opt: Adam,
}

impl Critic {
    fn new(res: usize, hidden: usize, seed: u64, lr: f64) -> Result<Self> {
        let disc = Discriminator::new(res, hidden, seed)?;
        let opt = Adam::new(disc.params(), lr);
        Ok(Self { disc, opt })
    }

    /// One critic update; returns `(L_D, R1)` before weighting.
    fn update(&mut self, real: &[Tensor], fake: &[Tensor], w: &LossWeights) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let mut real_logits = Vec::new();
        let mut fake_logits = Vec::new();
        let mut grad_sq = Vec::new();
        for im in real {
            let x = g.constant(im.clone());
            if w.r1_on_real {
                let (l, s) = self.disc.logit_and_grad_sq(&mut g, x)?;
                real_logits.push(l);
                grad_sq.push(s);
            } else {
                real_logits.push(self.disc.logit(&mut g, x)?);
            }
        }
        for im in fake {
            let x = g.constant(im.clone());
            if w.r1_on_real {
                fake_logits.push(self.disc.logit(&mut g, x)?);
            } else {
                let (l, s) = self.disc.logit_and_grad_sq(&mut g, x)?;
                fake_logits.push(l);
                grad_sq.push(s);
            }
        }
        let ld = discriminator_loss(&mut g, &real_logits, &fake_logits)?;
        let r1 = r1_penalty(&mut g, &grad_sq);
        let a = g.scale(ld, w.disc);
        let b = g.scale(r1, w.r1);
        let total = g.add(a, b);
        let (ldv, r1v) = (g.value(ld).item(), g.value(r1).item());
        if !g.value(total).item().is_finite() {
            return Err(Error::Numerical("non-finite critic loss".into()));
        }
        let grads = g.backward(total);
        let pg = g.param_grads(&grads, self.disc.params());
        self.opt.step(self.disc.params_mut(), &pg);
        Ok((ldv, r1v))
    }

    fn save_into(&self, ck: &mut Checkpoint) {
        ck.insert_params(self.disc.params());
        ck.insert_all(self.opt.to_named(self.disc.params()));
    }

    fn load_from(&mut self, ck: &Checkpoint) -> Result<()> {
        self.disc.params_mut().load_named(&ck.tensors)?;
        self.opt.load_named(self.disc.params(), &ck.tensors, ck.step)
    }
}

fn checksums(p: &Pipeline, names: &[&str]) -> Vec<(String, String)> {
    names
        .iter()
        .map(|&n| {
            let c = match n {
                "generator" => p.generator.params().checksum(),
                "global_encoder" => p.global.params().checksum(),
                "local_encoder" => p.local.as_ref().map(|l| l.encoder.params().checksum()).unwrap_or_default(),
                _ => String::new(),
            };
            (n.to_string(), c)
        })
        .collect()
}

fn verify_frozen(p: &Pipeline, before: &[(String, String)]) -> Result<()> {
    let names: Vec<&str> = before.iter().map(|(n, _)| n.as_str()).collect();
    for ((n, a), (_, b)) in before.iter().zip(checksums(p, &names)) {
        if *a != b {
            return Err(Error::State(format!("frozen module {n} changed during training")));
        }
    }
    Ok(())
}

fn log_csv(logs: &[StepLog]) -> String {
    let mut s = String::from("step");
    if let Some(first) = logs.first() {
        for (n, _) in &first.values {
            let _ = write!(s, ",{n}");
        }
    }
    s.push('\n');
    for l in logs {
        let _ = write!(s, "{}", l.step);
        for (_, v) in &l.values {
            let _ = write!(s, ",{v:.10}");
        }
        s.push('\n');
    }
    s
}

fn eval_csv(evals: &[EvalPoint]) -> String {
    let mut s = String::from("step");
    if let Some(first) = evals.first() {
        for n in first.values.keys() {
            let _ = write!(s, ",{n}");
        }
    }
    s.push('\n');
    for e in evals {
        let _ = write!(s, "{}", e.step);
        for v in e.values.values() {
            let _ = write!(s, ",{v:.10}");
        }
        s.push('\n');
    }
    s
}

/// Keep previously logged rows before `start` when resuming.
fn merge_previous(path: &Path, start: usize, fresh: &str) -> String {
    let Ok(old) = std::fs::read_to_string(path) else { return fresh.to_string() };
    let mut lines = fresh.lines();
    let header = lines.next().unwrap_or("step");
    let mut out = format!("{header}\n");
    for l in old.lines().skip(1) {
        if l.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s < start) {
            out.push_str(l);
            out.push('\n');
        }
    }
    for l in lines {
        out.push_str(l);
        out.push('\n');
    }
    out
}

fn write_logs(ctx: &TrainContext, stage: Stage, report: &StageReport) -> Result<()> {
    let Some(dir) = &ctx.dir else { return Ok(()) };
    std::fs::create_dir_all(dir)?;
    let mp = dir.join(format!("{}_metrics.csv", stage.as_str()));
    let ep = dir.join(format!("{}_eval.csv", stage.as_str()));
    let (m, e) = (log_csv(&report.logs), eval_csv(&report.evals));
    let (m, e) = if report.start_step > 0 {
        (merge_previous(&mp, report.start_step, &m), merge_previous(&ep, report.start_step + 1, &e))
    } else {
        (m, e)
    };
    std::fs::write(mp, m)?;
    std::fs::write(ep, e)?;
    Ok(())
}

fn check_finite(total: f64, step: usize, ctx: &TrainContext, stage: Stage) -> Result<()> {
    if total.is_finite() {
        return Ok(());
    }
    let last = ctx
        .checkpoint_path(stage)
        .filter(|p| p.exists())
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "none".into());
    Err(Error::Numerical(format!("non-finite {} loss at step {step}; last good checkpoint: {last}", stage.as_str())))
}

fn stage_checkpoint(stage: Stage, step: usize, cfg: &StageConfig) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(stage.as_str());
    ck.step = step as u64;
    ck.metadata.insert("stage_config".into(), serde_json::to_value(cfg)?);
    Ok(ck)
}

fn progress(ctx: &TrainContext, stage: Stage, log: &StepLog, total_steps: usize) {
    if ctx.verbose && (log.step % 50 == 0 || log.step + 1 == total_steps) {
        let parts: Vec<String> = log.values.iter().map(|(n, v)| format!("{n}={v:.5}")).collect();
        eprintln!("[{}] step {}/{} {}", stage.as_str(), log.step + 1, total_steps, parts.join(" "));
    }
}

fn should_eval(done: usize, cfg: &StageConfig) -> bool {
    done == cfg.iterations || (cfg.eval_every > 0 && done % cfg.eval_every == 0)
}

fn should_checkpoint(done: usize, cfg: &StageConfig) -> bool {
    done == cfg.iterations || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0)
}

/// Stage I: `E_g` under `L_geo + L_code + L_rec` at both resolutions.
pub fn stage1_loss(p: &Pipeline, batch: &[TrainingSample], w: &LossWeights, proxies: &Proxies) -> Result<(Graph, Var, Vec<(&'static str, f64)>)> {
    let gen = &p.generator;
    let mut g = Graph::new();
    let mut totals = Vec::new();
    let mut acc = [0.0f64; 6];
    for s in batch {
        let img = g.constant(s.image_hi.clone());
        let codes = p.global.forward(&mut g, img)?;
        let lc = code_loss(&mut g, codes, &s.latent.codes)?;
        let (vars, _) = gen.render_graph(&mut g, codes, &s.pose, None)?;
        let rec_lo = reconstruction_loss(&mut g, vars.rgb_lo, &s.image_lo, w, proxies)?;
        let rec_hi = reconstruction_loss(&mut g, vars.rgb_hi, &s.image_hi, w, proxies)?;
        let sh = &s.shape;
        let (sdf_on, normals_on, _) = gen.sdf_and_normals(&mut g, codes, &sh.points_on);
        let xf = g.constant(crate::generator::points_tensor(&sh.points_free));
        let f_free = gen.trunk(&mut g, codes, xf);
        let sdf_free = gen.sdf_from_features(&mut g, f_free, &sh.points_free);
        let (lo, lf) = geometry_loss(
            &mut g,
            GeometryPrediction { sdf_on, normals_on, sdf_free },
            &sh.normals_on,
            &sh.normal_valid,
            &sh.sdf_free,
            w,
        )?;
        let t = g.sum_vars(&[lo, lf, lc, rec_lo.total, rec_hi.total]);
        for (a, v) in acc.iter_mut().zip([
            g.value(t).item(),
            g.value(lo).item(),
            g.value(lf).item(),
            g.value(lc).item(),
            g.value(rec_lo.total).item(),
            g.value(rec_hi.total).item(),
        ]) {
            *a += v / batch.len() as f64;
        }
        totals.push(t);
    }
    let s = g.sum_vars(&totals);
    let total = g.scale(s, 1.0 / batch.len() as f64);
    let names = ["total", "geo_surface", "geo_free", "code", "rec_lo", "rec_hi"];
    Ok((g, total, names.into_iter().zip(acc).collect()))
}

fn stage1_batch(p: &Pipeline, cfg: &TrainingConfig, step: usize) -> Result<Vec<TrainingSample>> {
    let sc = &cfg.stage1;
    let mut rng = step_rng(sc.seed, step);
    let gen = &p.generator;
    let gc = gen.config();
    let latents = gen.sample_latent(sc.batch_size, rng.random())?;
    latents
        .iter()
        .map(|w| {
            let pose = cfg.synthesis.poses.sample(&mut rng, gc.fov, gc.camera_radius)?;
            synthesize(gen, w, &pose, &cfg.synthesis, &mut rng)
        })
        .collect()
}

fn stage1_eval(p: &Pipeline, held: &[HeldOutSample], step: usize) -> Result<EvalPoint> {
    let mut values = BTreeMap::new();
    values.insert("code".to_string(), held_out_code_loss(p, held)?);
    values.insert("source_mse".to_string(), held_out_mse(p, held, FusionMode::Global, false)?);
    Ok(EvalPoint { step, values })
}

pub fn train_stage1(p: &mut Pipeline, cfg: &TrainingConfig, ctx: &TrainContext) -> Result<StageReport> {
    let sc = &cfg.stage1;
    sc.validate(Stage::I)?;
    let proxies = Proxies::new(cfg.proxy_seed);
    let held = held_out_set(&p.generator, cfg.held_out, &cfg.synthesis.poses, cfg.held_out_seed)?;
    let frozen = checksums(p, &sc.frozen_modules(Stage::I));
    let mut opt = Trainable::new(p.global.params(), sc.learning_rate);
    let mut start = 0;
    if ctx.resume {
        if let Some(path) = ctx.checkpoint_path(Stage::I).filter(|p| p.exists()) {
            let ck = Checkpoint::load(&path)?;
            ck.expect_kind(Stage::I.as_str())?;
            p.global.params_mut().load_named(&ck.tensors)?;
            opt.adam.load_named(p.global.params(), &ck.tensors, ck.step)?;
            start = ck.step as usize;
        }
    }
    let mut report = StageReport { stage: Stage::I, start_step: start, logs: Vec::new(), evals: Vec::new(), checkpoint: None, frozen_checksums: frozen.clone() };
    if start == 0 {
        report.evals.push(stage1_eval(p, &held, 0)?);
    }
    let end = ctx.stop_after.map_or(sc.iterations, |s| s.min(sc.iterations));
    for step in start..end {
        let batch = stage1_batch(p, cfg, step)?;
        let (g, total, values) = stage1_loss(p, &batch, &cfg.weights, &proxies)?;
        check_finite(g.value(total).item(), step, ctx, Stage::I)?;
        let grads = g.backward(total);
        opt.step(&g, &grads, p.global.params_mut());
        let log = StepLog { step, values };
        progress(ctx, Stage::I, &log, sc.iterations);
        report.logs.push(log);
        let done = step + 1;
        if should_eval(done, sc) {
            report.evals.push(stage1_eval(p, &held, done)?);
        }
        if should_checkpoint(done, sc) || done == end {
            if let Some(path) = ctx.checkpoint_path(Stage::I) {
                let mut ck = stage_checkpoint(Stage::I, done, sc)?;
                ck.insert_params(p.global.params());
                ck.insert_all(opt.adam.to_named(p.global.params()));
                ck.save(&path)?;
                report.checkpoint = Some(path);
            }
        }
    }
    verify_frozen(p, &frozen)?;
    write_logs(ctx, Stage::I, &report)?;
    Ok(report)
}

/// A render and its pose, for the adversarial and novel-view stages.
struct View {
    pose: CameraPose,
    image_hi: Tensor,
}

fn render_view(gen: &Generator, w: &LatentCode, pose: CameraPose) -> Result<View> {
    let out = gen.render(w, &pose)?;
    Ok(View { pose, image_hi: out.image_hi })
}

fn stage2_batch(p: &Pipeline, cfg: &TrainingConfig, step: usize) -> Result<Vec<View>> {
    let sc = &cfg.stage2;
    let mut rng = step_rng(sc.seed, step);
    let gen = &p.generator;
    let gc = gen.config();
    let latents = gen.sample_latent(sc.batch_size, rng.random())?;
    latents
        .iter()
        .map(|w| {
            let pose = cfg.synthesis.poses.sample(&mut rng, gc.fov, gc.camera_radius)?;
            render_view(gen, w, pose)
        })
        .collect()
}

/// Stage II: high-resolution reconstruction through the source-view FiLM plus the adversarial term.
fn stage2_loss(p: &Pipeline, batch: &[View], critic: &Critic, w: &LossWeights, proxies: &Proxies) -> Result<(Graph, Var, Vec<(&'static str, f64)>, Vec<Tensor>)> {
    let mut g = Graph::new();
    let mut totals = Vec::new();
    let mut fakes = Vec::new();
    let mut logits = Vec::new();
    let mut rec_sum = 0.0;
    for v in batch {
        let inv = p.invert(&v.image_hi, &v.pose)?;
        let codes = g.constant(inv.w.codes.clone());
        let (vars, _) = p.source_view_graph(&mut g, codes, &inv, &v.pose)?;
        let rec = reconstruction_loss(&mut g, vars.rgb_hi, &v.image_hi, w, proxies)?;
        rec_sum += g.value(rec.total).item();
        logits.push(critic.disc.logit(&mut g, vars.rgb_hi)?);
        fakes.push(g.value(vars.rgb_hi).clone());
        totals.push(rec.total);
    }
    let adv = adversarial_loss(&mut g, &logits)?;
    let rec = g.sum_vars(&totals);
    let rec = g.scale(rec, 1.0 / batch.len() as f64);
    let wadv = g.scale(adv, w.adv);
    let total = g.add(rec, wadv);
    let values = vec![("total", g.value(total).item()), ("rec_hi", rec_sum / batch.len() as f64), ("adv", g.value(adv).item())];
    Ok((g, total, values, fakes))
}

fn stage2_eval(p: &Pipeline, held: &[HeldOutSample], step: usize) -> Result<EvalPoint> {
    let mut values = BTreeMap::new();
    values.insert("source_mse".to_string(), held_out_mse(p, held, FusionMode::Local, false)?);
    values.insert("novel_mse".to_string(), held_out_mse(p, held, FusionMode::Local, true)?);
    Ok(EvalPoint { step, values })
}

fn ensure_local(p: &mut Pipeline) -> Result<()> {
    if p.local.is_none() {
        p.local = Some(p.new_local_branch()?);
    }
    Ok(())
}

pub fn train_stage2(p: &mut Pipeline, cfg: &TrainingConfig, ctx: &TrainContext) -> Result<StageReport> {
    let sc = &cfg.stage2;
    sc.validate(Stage::II)?;
    ensure_local(p)?;
    let proxies = Proxies::new(cfg.proxy_seed);
    let held = held_out_set(&p.generator, cfg.held_out, &cfg.synthesis.poses, cfg.held_out_seed)?;
    let frozen = checksums(p, &sc.frozen_modules(Stage::II));
    let hi = p.generator.config().hi_res();
    let mut critic = Critic::new(hi, cfg.discriminator_hidden, sc.seed, sc.learning_rate)?;
    let (mut opt_e, mut opt_f) = {
        let l = p.local.as_ref().expect("local branch");
        (Trainable::new(l.encoder.params(), sc.learning_rate), Trainable::new(l.film.params(), sc.learning_rate))
    };
    let mut start = 0;
    if ctx.resume {
        if let Some(path) = ctx.checkpoint_path(Stage::II).filter(|p| p.exists()) {
            let ck = Checkpoint::load(&path)?;
            ck.expect_kind(Stage::II.as_str())?;
            let l = p.local.as_mut().expect("local branch");
            l.encoder.params_mut().load_named(&ck.tensors)?;
            l.film.params_mut().load_named(&ck.tensors)?;
            opt_e.adam.load_named(l.encoder.params(), &ck.tensors, ck.step)?;
            opt_f.adam.load_named(l.film.params(), &ck.tensors, ck.step)?;
            critic.load_from(&ck)?;
            start = ck.step as usize;
        }
    }
    let mut report = StageReport { stage: Stage::II, start_step: start, logs: Vec::new(), evals: Vec::new(), checkpoint: None, frozen_checksums: frozen.clone() };
    if start == 0 {
        report.evals.push(stage2_eval(p, &held, 0)?);
    }
    let end = ctx.stop_after.map_or(sc.iterations, |s| s.min(sc.iterations));
    for step in start..end {
        let batch = stage2_batch(p, cfg, step)?;
        let (g, total, mut values, fakes) = stage2_loss(p, &batch, &critic, &cfg.weights, &proxies)?;
        check_finite(g.value(total).item(), step, ctx, Stage::II)?;
        let grads = g.backward(total);
        {
            let l = p.local.as_mut().expect("local branch");
            opt_e.step(&g, &grads, l.encoder.params_mut());
            opt_f.step(&g, &grads, l.film.params_mut());
        }
        if step % cfg.discriminator_every == 0 {
            let real: Vec<Tensor> = batch.iter().map(|v| v.image_hi.clone()).collect();
            let (ld, r1) = critic.update(&real, &fakes, &cfg.weights)?;
            values.push(("disc", ld));
            values.push(("r1", r1));
        } else {
            values.push(("disc", f64::NAN));
            values.push(("r1", f64::NAN));
        }
        let log = StepLog { step, values };
        progress(ctx, Stage::II, &log, sc.iterations);
        report.logs.push(log);
        let done = step + 1;
        if should_eval(done, sc) {
            report.evals.push(stage2_eval(p, &held, done)?);
        }
        if should_checkpoint(done, sc) || done == end {
            if let Some(path) = ctx.checkpoint_path(Stage::II) {
                let l = p.local.as_ref().expect("local branch");
                let mut ck = stage_checkpoint(Stage::II, done, sc)?;
                ck.insert_params(l.encoder.params());
                ck.insert_params(l.film.params());
                ck.insert_all(opt_e.adam.to_named(l.encoder.params()));
                ck.insert_all(opt_f.adam.to_named(l.film.params()));
                critic.save_into(&mut ck);
                ck.save(&path)?;
                report.checkpoint = Some(path);
            }
        }
    }
    verify_frozen(p, &frozen)?;
    write_logs(ctx, Stage::II, &report)?;
    Ok(report)
}

/// `n/2` latents, each seen from two poses drawn with the curriculum-scaled spread.
fn stage3_batch(p: &Pipeline, cfg: &TrainingConfig, step: usize) -> Result<Vec<(View, View)>> {
    let sc = &cfg.stage3;
    let mut rng = step_rng(sc.seed, step);
    let gen = &p.generator;
    let gc = gen.config();
    let poses = cfg.synthesis.poses.with_curriculum(sc.curriculum().alpha(step));
    let latents = gen.sample_latent(sc.batch_size / 2, rng.random())?;
    latents
        .iter()
        .map(|w| {
            let a = poses.sample(&mut rng, gc.fov, gc.camera_radius)?;
            let b = poses.sample(&mut rng, gc.fov, gc.camera_radius)?;
            Ok((render_view(gen, w, a)?, render_view(gen, w, b)?))
        })
        .collect()
}

/// Stage III: cross-view reconstruction in both directions plus the ADA residual and adversarial terms.
fn stage3_loss(
    p: &Pipeline,
    batch: &[(View, View)],
    critic: &Critic,
    w: &LossWeights,
    proxies: &Proxies,
) -> Result<(Graph, Var, Vec<(&'static str, f64)>, Vec<Tensor>, Vec<Tensor>)> {
    let mut g = Graph::new();
    let mut totals = Vec::new();
    let mut logits = Vec::new();
    let mut fakes = Vec::new();
    let mut reals = Vec::new();
    let (mut rec_sum, mut ada_sum) = (0.0, 0.0);
    for (a, b) in batch {
        for (src, dst) in [(a, b), (b, a)] {
            let inv = p.invert(&src.image_hi, &src.pose)?;
            let qv = p.view(&inv.w, &dst.pose)?;
            let codes = g.constant(inv.w.codes.clone());
            let (vars, _, d_q) = p.hybrid_graph(&mut g, codes, &inv.delta, &inv.source_view, &qv)?;
            let rec = reconstruction_loss(&mut g, vars.rgb_hi, &dst.image_hi, w, proxies)?;
            let ada = ada_residual_loss(&mut g, d_q, &dst.image_hi, &qv.image_lo, w)?;
            rec_sum += g.value(rec.total).item();
            ada_sum += g.value(ada).item();
            logits.push(critic.disc.logit(&mut g, vars.rgb_hi)?);
            fakes.push(g.value(vars.rgb_hi).clone());
            reals.push(dst.image_hi.clone());
            totals.push(g.add(rec.total, ada));
        }
    }
    let n = totals.len() as f64;
    let adv = adversarial_loss(&mut g, &logits)?;
    let s = g.sum_vars(&totals);
    let s = g.scale(s, 1.0 / n);
    let wadv = g.scale(adv, w.adv);
    let total = g.add(s, wadv);
    let values = vec![("total", g.value(total).item()), ("rec_novel", rec_sum / n), ("ada", ada_sum / n), ("adv", g.value(adv).item())];
    Ok((g, total, values, reals, fakes))
}

fn stage3_eval(p: &Pipeline, held: &[HeldOutSample], step: usize) -> Result<EvalPoint> {
    let mut values = BTreeMap::new();
    values.insert("source_mse".to_string(), held_out_mse(p, held, FusionMode::Hybrid, false)?);
    values.insert("novel_mse".to_string(), held_out_mse(p, held, FusionMode::Hybrid, true)?);
    Ok(EvalPoint { step, values })
}

pub fn train_stage3(p: &mut Pipeline, cfg: &TrainingConfig, ctx: &TrainContext) -> Result<StageReport> {
    let sc = &cfg.stage3;
    sc.validate(Stage::III)?;
    if p.local.is_none() {
        return Err(Error::State("stage III needs a trained stage-II local branch".into()));
    }
    if p.hybrid.is_none() {
        p.hybrid = Some(p.new_hybrid_branch()?);
    }
    let proxies = Proxies::new(cfg.proxy_seed);
    let held = held_out_set(&p.generator, cfg.held_out, &cfg.synthesis.poses, cfg.held_out_seed)?;
    let frozen = checksums(p, &sc.frozen_modules(Stage::III));
    let hi = p.generator.config().hi_res();
    let mut critic = Critic::new(hi, cfg.discriminator_hidden, sc.seed, sc.learning_rate)?;
    let lr = sc.learning_rate;
    let (mut opt_ada, mut opt_in, mut opt_out, mut opt_l) = {
        let h = p.hybrid.as_ref().expect("hybrid branch");
        let l = p.local.as_ref().expect("local branch");
        (
            Trainable::new(h.ada.params(), lr),
            Trainable::new(h.inner.params(), lr),
            Trainable::new(h.outer.params(), lr),
            Trainable::new(l.encoder.params(), lr),
        )
    };
    let mut start = 0;
    if ctx.resume {
        if let Some(path) = ctx.checkpoint_path(Stage::III).filter(|p| p.exists()) {
            let ck = Checkpoint::load(&path)?;
            ck.expect_kind(Stage::III.as_str())?;
            let h = p.hybrid.as_mut().expect("hybrid branch");
            h.ada.params_mut().load_named(&ck.tensors)?;
            h.inner.params_mut().load_named(&ck.tensors)?;
            h.outer.params_mut().load_named(&ck.tensors)?;
            opt_ada.adam.load_named(h.ada.params(), &ck.tensors, ck.step)?;
            opt_in.adam.load_named(h.inner.params(), &ck.tensors, ck.step)?;
            opt_out.adam.load_named(h.outer.params(), &ck.tensors, ck.step)?;
            let l = p.local.as_mut().expect("local branch");
            l.encoder.params_mut().load_named(&ck.tensors)?;
            if sc.train_local {
                opt_l.adam.load_named(l.encoder.params(), &ck.tensors, ck.step)?;
            }
            critic.load_from(&ck)?;
            start = ck.step as usize;
        }
    }
    let mut report = StageReport { stage: Stage::III, start_step: start, logs: Vec::new(), evals: Vec::new(), checkpoint: None, frozen_checksums: frozen.clone() };
    if start == 0 {
        report.evals.push(stage3_eval(p, &held, 0)?);
    }
    let end = ctx.stop_after.map_or(sc.iterations, |s| s.min(sc.iterations));
    for step in start..end {
        let batch = stage3_batch(p, cfg, step)?;
        let (g, total, mut values, reals, fakes) = stage3_loss(p, &batch, &critic, &cfg.weights, &proxies)?;
        check_finite(g.value(total).item(), step, ctx, Stage::III)?;
        let grads = g.backward(total);
        {
            let h = p.hybrid.as_mut().expect("hybrid branch");
            opt_ada.step(&g, &grads, h.ada.params_mut());
            opt_in.step(&g, &grads, h.inner.params_mut());
            opt_out.step(&g, &grads, h.outer.params_mut());
            if sc.train_local {
                opt_l.step(&g, &grads, p.local.as_mut().expect("local branch").encoder.params_mut());
            }
        }
        if step % cfg.discriminator_every == 0 {
            let (ld, r1) = critic.update(&reals, &fakes, &cfg.weights)?;
            values.push(("disc", ld));
            values.push(("r1", r1));
        } else {
            values.push(("disc", f64::NAN));
            values.push(("r1", f64::NAN));
        }
        values.push(("curriculum", sc.curriculum().alpha(step)));
        let log = StepLog { step, values };
        progress(ctx, Stage::III, &log, sc.iterations);
        report.logs.push(log);
        let done = step + 1;
        if should_eval(done, sc) {
            report.evals.push(stage3_eval(p, &held, done)?);
        }
        if should_checkpoint(done, sc) || done == end {
            if let Some(path) = ctx.checkpoint_path(Stage::III) {
                let h = p.hybrid.as_ref().expect("hybrid branch");
                let l = p.local.as_ref().expect("local branch");
                let mut ck = stage_checkpoint(Stage::III, done, sc)?;
                for (ps, opt) in [(h.ada.params(), &opt_ada), (h.inner.params(), &opt_in), (h.outer.params(), &opt_out)] {
                    ck.insert_params(ps);
                    ck.insert_all(opt.adam.to_named(ps));
                }
                ck.insert_params(l.encoder.params());
                if sc.train_local {
                    ck.insert_all(opt_l.adam.to_named(l.encoder.params()));
                }
                critic.save_into(&mut ck);
                ck.save(&path)?;
                report.checkpoint = Some(path);
            }
        }
    }
    verify_frozen(p, &frozen)?;
    write_logs(ctx, Stage::III, &report)?;
    Ok(report)
}

/// Load whichever stage checkpoints exist in `dir` into a fresh pipeline.
///
/// Returns the stages that were found.
pub fn load_stages(p: &mut Pipeline, dir: &Path) -> Result<Vec<Stage>> {
    load_stages_before(p, dir, None)
}

/// As [`load_stages`], ignoring `stop` and every later stage.
pub fn load_stages_before(p: &mut Pipeline, dir: &Path, stop: Option<Stage>) -> Result<Vec<Stage>> {
    let mut found = Vec::new();
    let wanted = |s: Stage| stop.is_none_or(|t| s < t);
    let path = |s: Stage| dir.join(format!("{}.ckpt", s.as_str()));
    if wanted(Stage::I) && path(Stage::I).exists() {
        let ck = Checkpoint::load(&path(Stage::I))?;
        ck.expect_kind(Stage::I.as_str())?;
        p.global.params_mut().load_named(&ck.tensors)?;
        found.push(Stage::I);
    }
    if wanted(Stage::II) && path(Stage::II).exists() {
        let ck = Checkpoint::load(&path(Stage::II))?;
        ck.expect_kind(Stage::II.as_str())?;
        ensure_local(p)?;
        let l = p.local.as_mut().expect("local branch");
        l.encoder.params_mut().load_named(&ck.tensors)?;
        l.film.params_mut().load_named(&ck.tensors)?;
        found.push(Stage::II);
    }
    if wanted(Stage::III) && path(Stage::III).exists() {
        if p.local.is_none() {
            return Err(Error::State("stage III checkpoint found without stage II".into()));
        }
        let ck = Checkpoint::load(&path(Stage::III))?;
        ck.expect_kind(Stage::III.as_str())?;
        let mut h = p.new_hybrid_branch()?;
        h.ada.params_mut().load_named(&ck.tensors)?;
        h.inner.params_mut().load_named(&ck.tensors)?;
        h.outer.params_mut().load_named(&ck.tensors)?;
        p.local.as_mut().expect("local branch").encoder.params_mut().load_named(&ck.tensors)?;
        p.hybrid = Some(h);
        found.push(Stage::III);
    }
    Ok(found)
}
