use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sdfinv_core::checkpoint::Checkpoint;
use sdfinv_core::config::RunConfig;
use sdfinv_core::data::{export_trajectory, Dataset, GeneratorField};
use sdfinv_core::editing::{parse_edit_spec, search_direction, AttributeOracle, DirectionCatalog, MeanLuminance, PlantedLinear};
use sdfinv_core::eval::{evaluate_geometry, evaluate_trajectory, extract_mesh, geometry_csv, InversionModel, OracleModel};
use sdfinv_core::fusion::{FusionMode, Pipeline, PipelineModel};
use sdfinv_core::generator::{Generator, LatentCode};
use sdfinv_core::imageio::{hstack, load_png, save_png};
use sdfinv_core::losses::Proxies;
use sdfinv_core::rendering::CameraPose;
use sdfinv_core::training::{load_stages, load_stages_before, train_stage1, train_stage2, train_stage3, Stage, StageReport, TrainContext};

use crate::{Attribute, Cli, Command, Mode, PoseArg};

const GENERATOR_FILE: &str = "generator.ckpt";
const DIRECTIONS_FILE: &str = "directions.json";

/// A resolved configuration and the directory its artifacts live in.
pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    pub quiet: bool,
}

impl Run {
    pub fn open(cli: &Cli) -> Result<Self> {
        let mut overrides = cli.set.clone();
        if let Some(s) = cli.seed {
            overrides.push(format!("seed={s}"));
        }
        let resolved = match &cli.config {
            Some(p) => RunConfig::load(p, &overrides)?,
            None => RunConfig::resolve(None, &overrides)?,
        };
        let dir = resolved.run_dir();
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let text = resolved.to_toml();
        std::fs::write(dir.join("config.toml"), &text)?;
        if !cli.quiet {
            println!("# run directory: {}", dir.display());
            println!("{text}");
        }
        Ok(Self { cfg: resolved.effective(), dir, quiet: cli.quiet })
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    pub fn generator(&self) -> Result<Generator> {
        let p = self.dir.join(GENERATOR_FILE);
        if !p.exists() {
            bail!("no generator at {}; run `sdfinv pretrain-gan` with the same config first", p.display());
        }
        Ok(Generator::from_checkpoint(&Checkpoint::load(&p)?)?)
    }

    fn pipeline_before(&self, stop: Option<Stage>) -> Result<(Pipeline, Vec<Stage>)> {
        let mut p = Pipeline::new(self.generator()?, self.cfg.encoder.clone())?;
        let found = load_stages_before(&mut p, &self.dir, stop)?;
        Ok((p, found))
    }

    pub fn pipeline(&self) -> Result<Pipeline> {
        let mut p = Pipeline::new(self.generator()?, self.cfg.encoder.clone())?;
        if load_stages(&mut p, &self.dir)?.is_empty() {
            bail!("no trained encoder in {}; run `sdfinv train-stage1` first", self.dir.display());
        }
        Ok(p)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let d = self.dir.join("data");
        if !d.join("index.json").exists() {
            bail!("no dataset cache at {}; run `sdfinv build-data` first", d.display());
        }
        Ok(Dataset::open(&d)?)
    }

    fn pose(&self, p: PoseArg) -> Result<CameraPose> {
        Ok(self.cfg.generator.pose(p.0, p.1)?)
    }
}

fn best_mode(p: &Pipeline, requested: Option<Mode>) -> Result<FusionMode> {
    if let Some(m) = requested {
        let m = FusionMode::from(m);
        if !p.supports(m) {
            bail!("the {} mode needs a stage that has not been trained", m.as_str());
        }
        return Ok(m);
    }
    Ok([FusionMode::Hybrid, FusionMode::Local, FusionMode::Global].into_iter().find(|m| p.supports(*m)).unwrap_or(FusionMode::Global))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn load_input(run: &Run, path: &Path) -> Result<sdfinv_core::Tensor> {
    let img = load_png(path).with_context(|| format!("reading {}", path.display()))?;
    let hi = run.cfg.generator.hi_res();
    if img.shape() != [3, hi, hi] {
        bail!("{} is {:?}; this model expects a {hi}x{hi} RGB image", path.display(), &img.shape()[1..]);
    }
    Ok(img)
}

fn write_latent(w: &LatentCode, path: &Path) -> Result<()> {
    let rows: Vec<Vec<f64>> = (0..w.n_layers()).map(|i| w.layer(i).to_vec()).collect();
    std::fs::write(path, serde_json::to_vec_pretty(&rows)?)?;
    Ok(())
}

fn report_stage(run: &Run, r: &StageReport) {
    if let Some(last) = r.logs.last() {
        let parts: Vec<String> = last.values.iter().map(|(n, v)| format!("{n}={v:.5}")).collect();
        run.say(format!("{} finished at step {}: {}", r.stage.as_str(), last.step + 1, parts.join(" ")));
    }
    for e in &r.evals {
        let parts: Vec<String> = e.values.iter().map(|(n, v)| format!("{n}={v:.6}")).collect();
        run.say(format!("  eval step {}: {}", e.step, parts.join(" ")));
    }
}

fn train(run: &Run, stage: Stage, resume: bool) -> Result<()> {
    let (mut p, found) = run.pipeline_before(Some(stage))?;
    let need = match stage {
        Stage::I => None,
        Stage::II => Some(Stage::I),
        Stage::III => Some(Stage::II),
    };
    if let Some(n) = need {
        if !found.contains(&n) {
            bail!("{} needs the {} checkpoint in {}", stage.as_str(), n.as_str(), run.dir.display());
        }
    }
    let ctx = TrainContext { dir: Some(run.dir.clone()), resume, verbose: !run.quiet, stop_after: None };
    let r = match stage {
        Stage::I => train_stage1(&mut p, &run.cfg.training, &ctx)?,
        Stage::II => train_stage2(&mut p, &run.cfg.training, &ctx)?,
        Stage::III => train_stage3(&mut p, &run.cfg.training, &ctx)?,
    };
    report_stage(run, &r);
    Ok(())
}

fn pretrain(run: &Run) -> Result<()> {
    let gen = Generator::new(run.cfg.generator.clone())?;
    gen.to_checkpoint()?.save(&run.dir.join(GENERATOR_FILE))?;
    let ws = gen.sample_latent(4, run.cfg.generator.seed ^ 0x7072)?;
    let mut rows = Vec::new();
    for az in [-0.4, 0.0, 0.4] {
        let pose = gen.config().pose(az, 0.1)?;
        let frames = ws.iter().map(|w| Ok(gen.render(w, &pose)?.image_hi)).collect::<Result<Vec<_>>>()?;
        rows.push(hstack(&frames)?);
    }
    save_png(&stack_rows(&rows), &run.dir.join("generator_preview.png"))?;
    run.say(format!("generator: {} parameters, checksum {}", gen.params().len(), &gen.params().checksum()[..16]));
    Ok(())
}

fn build_data(run: &Run) -> Result<()> {
    let gen = run.generator()?;
    let ds = Dataset::build(&gen, &run.cfg.training.synthesis, &run.cfg.data, &run.dir.join("data"))?;
    run.say(format!("dataset: {} samples, {} trajectories", ds.len(), ds.index.trajectories.len()));
    Ok(())
}

fn invert(run: &Run, image: &Path, pose: PoseArg, mode: Option<Mode>, out: Option<PathBuf>) -> Result<()> {
    let p = run.pipeline()?;
    let mode = best_mode(&p, mode)?;
    let img = load_input(run, image)?;
    let pose = run.pose(pose)?;
    let inv = p.invert(&img, &pose)?;
    let rec = p.reconstruct(&inv, &pose, mode)?;
    let out = out.unwrap_or_else(|| run.dir.join("invert").join(stem(image)));
    std::fs::create_dir_all(&out)?;
    write_latent(&inv.w, &out.join("latent.json"))?;
    save_png(&rec, &out.join(format!("reconstruction_{}.png", mode.as_str())))?;
    let err = sdfinv_core::eval::mse(&rec, &img)?;
    run.say(format!("{} reconstruction MSE {err:.6} written to {}", mode.as_str(), out.display()));
    Ok(())
}

fn edit(run: &Run, image: &Path, spec: &str, pose: PoseArg, source_pose: PoseArg, out: Option<PathBuf>) -> Result<()> {
    let (name, strength) = parse_edit_spec(spec)?;
    let cat_path = run.dir.join(DIRECTIONS_FILE);
    if !cat_path.exists() {
        bail!("no direction catalog at {}; run `sdfinv search-direction` first", cat_path.display());
    }
    let catalog = DirectionCatalog::load(&cat_path)?;
    let dir = catalog.get(&name)?;
    let p = run.pipeline()?;
    let img = load_input(run, image)?;
    let inv = p.invert(&img, &run.pose(source_pose)?)?;
    let query = run.pose(pose)?;
    let (w_edit, rendered) = if p.supports(FusionMode::Hybrid) {
        p.editing_forward(&inv, dir, strength, &query)?
    } else {
        let w = sdfinv_core::editing::apply_edit(&inv.w, dir, strength)?;
        let r = p.generator.render(&w, &query)?.image_hi;
        (w, r)
    };
    let out = out.unwrap_or_else(|| run.dir.join("edit"));
    std::fs::create_dir_all(&out)?;
    let base = format!("{}_{name}_{strength}", stem(image));
    save_png(&rendered, &out.join(format!("{base}.png")))?;
    write_latent(&w_edit, &out.join(format!("{base}_latent.json")))?;
    run.say(format!("edited render written to {}", out.join(format!("{base}.png")).display()));
    Ok(())
}

fn search(run: &Run, attribute: Attribute) -> Result<()> {
    let gen = run.generator()?;
    let cfg = &run.cfg.editing;
    let planted = matches!(attribute, Attribute::Planted).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.search.seed ^ 0x706c);
        let v: Vec<f64> = (0..gen.config().latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        PlantedLinear { v: v.iter().map(|x| x / n).collect(), center: gen.w_avg().to_vec() }
    });
    let lum = MeanLuminance { generator: &gen, pose: gen.config().pose(cfg.attribute_pose[0], cfg.attribute_pose[1])? };
    let oracle: &dyn AttributeOracle = match &planted {
        Some(p) => p,
        None => &lum,
    };
    let d = search_direction(&gen, oracle, &cfg.search)?;
    let cat_path = run.dir.join(DIRECTIONS_FILE);
    let mut catalog = if cat_path.exists() { DirectionCatalog::load(&cat_path)? } else { DirectionCatalog::default() };
    run.say(format!("direction {:?}: train accuracy {:.4}", d.attribute, d.margin.train_accuracy));
    if let Some(planted) = &planted {
        let cos: f64 = d.direction.iter().zip(&planted.v).map(|(a, b)| a * b).sum();
        run.say(format!("  cosine to planted direction {cos:.6}"));
    }
    catalog.directions.insert(d.attribute.clone(), d);
    catalog.save(&cat_path)?;
    Ok(())
}

fn source_frame(run: &Run) -> impl Fn(usize, usize) -> usize {
    let fixed = run.cfg.eval.source_frame;
    move |_, n| fixed.unwrap_or(n / 2)
}

fn render_trajectories(run: &Run, mode: Option<Mode>) -> Result<()> {
    let p = run.pipeline()?;
    let mode = best_mode(&p, mode)?;
    let trajs = run.dataset()?.trajectories()?;
    let root = run.dir.join("trajectories");
    let src = source_frame(run);
    for (i, t) in trajs.iter().enumerate() {
        let dir = root.join(format!("seq{i:02}"));
        export_trajectory(t, &dir.join("gt"))?;
        let s = src(i, t.poses.len());
        let model = PipelineModel { pipeline: &p, mode };
        let frames = model.reconstruct(&t.frames_hi[s], &t.poses[s], &t.poses)?;
        let pred = dir.join(mode.as_str());
        std::fs::create_dir_all(&pred)?;
        for (k, f) in frames.iter().enumerate() {
            save_png(f, &pred.join(format!("frame{k:04}.png")))?;
        }
        save_png(&stack_rows(&[hstack(&t.frames_hi)?, hstack(&frames)?]), &dir.join("strip.png"))?;
    }
    run.say(format!("{} trajectories rendered with the {} model under {}", trajs.len(), mode.as_str(), root.display()));
    Ok(())
}

/// Vertical concatenation of equally wide `[3, H, W]` images.
fn stack_rows(rows: &[sdfinv_core::Tensor]) -> sdfinv_core::Tensor {
    let w = rows[0].shape()[2];
    let h: usize = rows.iter().map(|r| r.shape()[1]).sum();
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for r in rows {
            let rh = r.shape()[1];
            data.extend_from_slice(&r.data()[c * rh * w..(c + 1) * rh * w]);
        }
    }
    sdfinv_core::Tensor::new(&[3, h, w], data)
}

fn eval_2d(run: &Run, oracle: bool) -> Result<()> {
    let trajs = run.dataset()?.trajectories()?;
    let proxies = Proxies::new(run.cfg.training.proxy_seed);
    let dir = run.dir.join("eval");
    let src = source_frame(run);
    let mut summaries = Vec::new();
    if oracle {
        let m = OracleModel::new(&trajs);
        let r = evaluate_trajectory(&m, &trajs, &src, &proxies)?;
        r.write_csv(&dir, "2d_oracle")?;
        summaries.push(r);
    } else {
        let p = run.pipeline()?;
        for mode in [FusionMode::Global, FusionMode::Local, FusionMode::Hybrid] {
            if !p.supports(mode) {
                continue;
            }
            let m = PipelineModel { pipeline: &p, mode };
            let r = evaluate_trajectory(&m, &trajs, &src, &proxies)?;
            r.write_csv(&dir, &format!("2d_{}", mode.as_str()))?;
            summaries.push(r);
        }
    }
    for r in &summaries {
        for view in [sdfinv_core::eval::ViewKind::Source, sdfinv_core::eval::ViewKind::Novel] {
            if let (Some(mse), Some(ssim)) = (r.mean(view, "mse"), r.mean(view, "ssim")) {
                run.say(format!("{:>7} {:>6}: mse {mse:.6} ssim {ssim:.4}", r.model, view.as_str()));
            }
        }
    }
    Ok(())
}

fn identities(run: &Run, gen: &Generator) -> Result<Vec<LatentCode>> {
    Ok(gen.sample_latent(run.cfg.eval.geometry_identities.max(1), run.cfg.data.seed ^ 0x3d3d)?)
}

fn eval_3d(run: &Run, oracle: bool) -> Result<()> {
    let ev = &run.cfg.eval;
    let pipeline = if oracle { None } else { Some(run.pipeline()?) };
    let owned;
    let gen = match &pipeline {
        Some(p) => &p.generator,
        None => {
            owned = run.generator()?;
            &owned
        }
    };
    let front = gen.config().pose(0.0, 0.0)?;
    let mut reports = Vec::new();
    for (i, w) in identities(run, gen)?.iter().enumerate() {
        let w_hat = match &pipeline {
            Some(p) => p.global.encode(&gen.render(w, &front)?.image_hi)?,
            None => w.clone(),
        };
        let pred = GeneratorField { generator: gen, latent: &w_hat };
        let gt = GeneratorField { generator: gen, latent: w };
        reports.push(evaluate_geometry(i, &pred, &gt, ev.geometry_points, ev.max_radius, ev.with_scale)?);
    }
    let dir = run.dir.join("eval");
    std::fs::create_dir_all(&dir)?;
    let name = if oracle { "3d_oracle.csv" } else { "3d_geometry.csv" };
    std::fs::write(dir.join(name), geometry_csv(&reports))?;
    let mean = reports.iter().map(|r| r.stats.median).sum::<f64>() / reports.len() as f64;
    run.say(format!("mean median scan-to-surface distance {mean:.6} over {} identities", reports.len()));
    Ok(())
}

fn export_mesh(run: &Run, identity: usize, resolution: Option<usize>) -> Result<()> {
    let mut p = Pipeline::new(run.generator()?, run.cfg.encoder.clone())?;
    let trained = load_stages(&mut p, &run.dir)?.contains(&Stage::I);
    let gen = &p.generator;
    let ids = identities(run, gen)?;
    let w = ids.get(identity).with_context(|| format!("identity {identity} is outside 0..{}", ids.len()))?;
    let res = resolution.unwrap_or(run.cfg.eval.mesh_resolution);
    let ext = run.cfg.eval.mesh_half_extent;
    let dir = run.dir.join("meshes");
    std::fs::create_dir_all(&dir)?;
    let gt = extract_mesh(&GeneratorField { generator: gen, latent: w }, res, ext)?;
    std::fs::write(dir.join(format!("identity{identity}_gt.obj")), gt.to_obj())?;
    run.say(format!("ground truth mesh: {} vertices, {} triangles", gt.vertices.len(), gt.triangles.len()));
    if trained {
        let w_hat = p.global.encode(&gen.render(w, &gen.config().pose(0.0, 0.0)?)?.image_hi)?;
        let m = extract_mesh(&GeneratorField { generator: gen, latent: &w_hat }, res, ext)?;
        std::fs::write(dir.join(format!("identity{identity}_pred.obj")), m.to_obj())?;
        run.say(format!("reconstructed mesh: {} vertices, {} triangles", m.vertices.len(), m.triangles.len()));
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let run = Run::open(cli)?;
    match &cli.command {
        Command::PretrainGan => pretrain(&run),
        Command::BuildData => build_data(&run),
        Command::TrainStage1 { resume } => train(&run, Stage::I, *resume),
        Command::TrainStage2 { resume } => train(&run, Stage::II, *resume),
        Command::TrainStage3 { resume } => train(&run, Stage::III, *resume),
        Command::Invert { image, pose, mode, out } => invert(&run, image, *pose, *mode, out.clone()),
        Command::Edit { image, edit: spec, pose, source_pose, out } => edit(&run, image, spec, *pose, *source_pose, out.clone()),
        Command::SearchDirection { attribute } => search(&run, *attribute),
        Command::RenderTrajectory { mode } => render_trajectories(&run, *mode),
        Command::Eval2d { oracle } => eval_2d(&run, *oracle),
        Command::Eval3d { oracle } => eval_3d(&run, *oracle),
        Command::ExportMesh { identity, resolution } => export_mesh(&run, *identity, *resolution),
        Command::Plot => {
            let figs = crate::plot::plot_run(&run.dir)?;
            for f in &figs {
                run.say(format!("wrote {}", f.display()));
            }
            Ok(())
        }
    }
}
