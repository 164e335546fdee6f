mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sdfinv_core::fusion::FusionMode;

#[derive(Parser, Debug)]
#[command(name = "sdfinv", version, about = "Train and evaluate encoders that invert a 3D-aware SDF generator")]
pub struct Cli {
    /// TOML run configuration; every key has a default.
    #[arg(long, global = true, env = "SDFINV_CONFIG")]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `training.stage1.iterations=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Global seed folded into every component seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Do not echo the resolved config or training progress.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mode {
    Global,
    Local,
    Hybrid,
}

impl From<Mode> for FusionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Global => FusionMode::Global,
            Mode::Local => FusionMode::Local,
            Mode::Hybrid => FusionMode::Hybrid,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Attribute {
    /// Mean brightness of a fixed-pose render.
    Luminance,
    /// A seeded random linear attribute with a known direction.
    Planted,
}

/// `azimuth,elevation` in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseArg(pub f64, pub f64);

impl std::str::FromStr for PoseArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (a, e) = s.split_once(',').ok_or_else(|| format!("pose must be az,el (radians), got {s:?}"))?;
        let a: f64 = a.trim().parse().map_err(|_| format!("bad azimuth {a:?}"))?;
        let e: f64 = e.trim().parse().map_err(|_| format!("bad elevation {e:?}"))?;
        Ok(PoseArg(a, e))
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Create the frozen generator (seeded random weights) and a preview grid.
    PretrainGan,
    /// Render the training and trajectory cache.
    BuildData,
    /// Train the global encoder.
    TrainStage1 {
        #[arg(long)]
        resume: bool,
    },
    /// Train the local encoder and its FiLM layer.
    TrainStage2 {
        #[arg(long)]
        resume: bool,
    },
    /// Train the alignment module and hybrid FiLM layers on paired views.
    TrainStage3 {
        #[arg(long)]
        resume: bool,
    },
    /// Invert an image and write the latent and reconstruction.
    Invert {
        image: PathBuf,
        /// Pose the image was taken from.
        #[arg(long, default_value = "0,0")]
        pose: PoseArg,
        /// Fusion mode; defaults to the most complete trained one.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Output directory (defaults to `<run>/invert/<image stem>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Invert an image, apply a latent edit and render it.
    Edit {
        image: PathBuf,
        /// `name:strength` from the direction catalog.
        #[arg(long = "edit")]
        edit: String,
        /// Pose to render the edited object from.
        #[arg(long, default_value = "0,0")]
        pose: PoseArg,
        /// Pose the image was taken from.
        #[arg(long, default_value = "0,0")]
        source_pose: PoseArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit an edit direction and add it to the catalog.
    SearchDirection {
        #[arg(long, value_enum, default_value = "luminance")]
        attribute: Attribute,
    },
    /// Reconstruct every cached trajectory from its source frame.
    RenderTrajectory {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Image metrics on the trajectory set.
    #[command(name = "eval-2d")]
    Eval2d {
        /// Score the ground-truth frames themselves.
        #[arg(long)]
        oracle: bool,
    },
    /// Scan-to-surface geometry metrics after keypoint alignment.
    #[command(name = "eval-3d")]
    Eval3d {
        #[arg(long)]
        oracle: bool,
    },
    /// Marching-tetrahedra mesh of a ground-truth and reconstructed identity.
    ExportMesh {
        #[arg(long, default_value_t = 0)]
        identity: usize,
        /// Grid resolution (defaults to `eval.mesh_resolution`).
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Figures for every metrics CSV in the run directory.
    Plot,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
