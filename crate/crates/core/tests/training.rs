use sdfinv_core::encoders::{EncoderConfig, Module};
use sdfinv_core::error::Error;
use sdfinv_core::fusion::{FusionMode, Pipeline};
use sdfinv_core::generator::{Generator, GeneratorConfig};
use sdfinv_core::training::{load_stages, load_stages_before, train_stage1, train_stage2, train_stage3, Stage, TrainContext, TrainingConfig};

fn tiny_pipeline() -> Pipeline {
    let gen = Generator::new(GeneratorConfig {
        latent_dim: 4,
        width: 8,
        feature_channels: 4,
        g1_hidden: 4,
        lo_res: 16,
        n_samples: 4,
        ..Default::default()
    })
    .unwrap();
    let enc = EncoderConfig {
        pyramid_channels: [4, 4, 4, 4],
        local_channels: 4,
        local_hidden: 4,
        hourglass_stacks: 1,
        hourglass_depth: 1,
        pe_frequencies: 1,
        ada_hidden: 4,
        ..Default::default()
    };
    Pipeline::new(gen, enc).unwrap()
}

fn tiny_training(iterations: usize) -> TrainingConfig {
    let mut t = TrainingConfig { held_out: 2, discriminator_hidden: 4, ..Default::default() };
    for s in [&mut t.stage1, &mut t.stage2, &mut t.stage3] {
        s.iterations = iterations;
        s.batch_size = 2;
        s.learning_rate = 1e-3;
        s.checkpoint_every = 2;
        s.eval_every = 2;
        s.curriculum_ramp = iterations;
    }
    t
}

fn checksums(p: &Pipeline) -> Vec<String> {
    let mut out = vec![p.generator.params().checksum(), p.global.params().checksum()];
    if let Some(l) = &p.local {
        out.push(l.encoder.params().checksum());
        out.push(l.film.params().checksum());
    }
    if let Some(h) = &p.hybrid {
        out.extend([h.ada.params().checksum(), h.inner.params().checksum(), h.outer.params().checksum()]);
    }
    out
}

fn run_all(p: &mut Pipeline, cfg: &TrainingConfig, ctx: &TrainContext) {
    train_stage1(p, cfg, ctx).unwrap();
    train_stage2(p, cfg, ctx).unwrap();
    train_stage3(p, cfg, ctx).unwrap();
}

#[test]
fn interrupted_and_resumed_training_matches_uninterrupted() {
    let cfg = tiny_training(4);
    let straight_dir = tempfile::tempdir().unwrap();
    let mut straight = tiny_pipeline();
    run_all(&mut straight, &cfg, &TrainContext::in_dir(straight_dir.path()));

    let dir = tempfile::tempdir().unwrap();
    let mut resumed = tiny_pipeline();
    let halt = TrainContext { stop_after: Some(3), ..TrainContext::in_dir(dir.path()) };
    let resume = TrainContext { resume: true, ..TrainContext::in_dir(dir.path()) };
    train_stage1(&mut resumed, &cfg, &halt).unwrap();
    let mut resumed = {
        let mut p = tiny_pipeline();
        load_stages(&mut p, dir.path()).unwrap();
        p
    };
    let r = train_stage1(&mut resumed, &cfg, &resume).unwrap();
    assert_eq!(r.start_step, 3);
    assert_eq!(r.logs.len(), 1);
    train_stage2(&mut resumed, &cfg, &halt).unwrap();
    train_stage2(&mut resumed, &cfg, &resume).unwrap();
    train_stage3(&mut resumed, &cfg, &halt).unwrap();
    train_stage3(&mut resumed, &cfg, &resume).unwrap();
    assert_eq!(checksums(&resumed), checksums(&straight));

    for stage in ["stage1", "stage2", "stage3"] {
        let a = std::fs::read_to_string(straight_dir.path().join(format!("{stage}_metrics.csv"))).unwrap();
        let b = std::fs::read_to_string(dir.path().join(format!("{stage}_metrics.csv"))).unwrap();
        assert_eq!(a, b, "{stage} metrics differ after resume");
    }
}

#[test]
fn frozen_modules_keep_their_checksums() {
    let cfg = tiny_training(2);
    let mut p = tiny_pipeline();
    let ctx = TrainContext::default();
    let gen0 = p.generator.params().checksum();
    let r1 = train_stage1(&mut p, &cfg, &ctx).unwrap();
    assert_eq!(r1.frozen_checksums.len(), 1);
    let global1 = p.global.params().checksum();
    train_stage2(&mut p, &cfg, &ctx).unwrap();
    assert_eq!(p.global.params().checksum(), global1);
    let local2 = p.local.as_ref().unwrap().encoder.params().checksum();
    train_stage3(&mut p, &cfg, &ctx).unwrap();
    assert_eq!(p.local.as_ref().unwrap().encoder.params().checksum(), local2);
    assert_eq!(p.global.params().checksum(), global1);
    assert_eq!(p.generator.params().checksum(), gen0);
}

#[test]
fn stage_order_is_enforced_and_partial_loads_stop_early() {
    let cfg = tiny_training(2);
    let mut p = tiny_pipeline();
    assert!(matches!(train_stage3(&mut p, &cfg, &TrainContext::default()), Err(Error::State(_))));

    let dir = tempfile::tempdir().unwrap();
    let ctx = TrainContext::in_dir(dir.path());
    run_all(&mut p, &cfg, &ctx);

    let mut fresh = tiny_pipeline();
    assert_eq!(load_stages_before(&mut fresh, dir.path(), Some(Stage::III)).unwrap(), vec![Stage::I, Stage::II]);
    assert!(fresh.supports(FusionMode::Local));
    assert!(!fresh.supports(FusionMode::Hybrid));

    let mut full = tiny_pipeline();
    assert_eq!(load_stages(&mut full, dir.path()).unwrap(), vec![Stage::I, Stage::II, Stage::III]);
    assert_eq!(checksums(&full), checksums(&p));
}

#[test]
fn odd_stage3_batch_is_rejected() {
    let mut cfg = tiny_training(2);
    cfg.stage3.batch_size = 3;
    assert!(matches!(cfg.validate(), Err(Error::InvalidArgument(_))));
}
