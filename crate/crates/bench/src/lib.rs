//! Shared fixtures for the benchmarks.

use sdfinv_core::encoders::EncoderConfig;
use sdfinv_core::fusion::Pipeline;
use sdfinv_core::generator::{Generator, GeneratorConfig, LatentCode};
use sdfinv_core::rendering::CameraPose;

/// Desk-scale generator used by the acceptance runs.
pub fn desk_generator() -> Generator {
    Generator::new(GeneratorConfig {
        latent_dim: 8,
        width: 32,
        feature_channels: 8,
        g1_hidden: 8,
        lo_res: 16,
        n_samples: 16,
        ..Default::default()
    })
    .expect("valid generator config")
}

/// Pipeline with a local branch attached, so every fusion mode up to `Local` runs.
pub fn desk_pipeline() -> Pipeline {
    let enc = EncoderConfig { pyramid_channels: [32, 64, 64, 64], ..Default::default() };
    let mut p = Pipeline::new(desk_generator(), enc).expect("valid pipeline");
    p.local = Some(p.new_local_branch().expect("local branch"));
    p
}

pub fn latent(gen: &Generator, seed: u64) -> LatentCode {
    gen.sample_latent(1, seed).expect("latent").remove(0)
}

pub fn frontal(gen: &Generator) -> CameraPose {
    gen.config().pose(0.0, 0.0).expect("pose")
}
