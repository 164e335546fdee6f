//! The run configuration: one nested TOML document with `key=value` overrides.
//!
//! The SHA-256 of the resolved document names the run directory, so two
//! invocations with equal configs share their artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetConfig;
use crate::editing::SearchConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::training::TrainingConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Trajectory frame used as the source view; `None` picks the middle frame.
    pub source_frame: Option<usize>,
    pub geometry_identities: usize,
    pub geometry_points: usize,
    pub max_radius: f64,
    pub with_scale: bool,
    pub mesh_resolution: usize,
    pub mesh_half_extent: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            source_frame: None,
            geometry_identities: 4,
            geometry_points: 2000,
            max_radius: 1.0,
            with_scale: false,
            mesh_resolution: 32,
            mesh_half_extent: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditingConfig {
    pub search: SearchConfig,
    /// Pose `(azimuth, elevation)` at which the luminance attribute is scored.
    pub attribute_pose: [f64; 2],
}

impl Default for EditingConfig {
    fn default() -> Self {
        Self { search: SearchConfig::default(), attribute_pose: [0.0, 0.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Mixed into every component seed; 0 leaves them as written.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub data: DatasetConfig,
    pub training: TrainingConfig,
    pub editing: EditingConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            generator: GeneratorConfig::default(),
            encoder: EncoderConfig::default(),
            data: DatasetConfig::default(),
            training: TrainingConfig::default(),
            editing: EditingConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn mix(global: u64, s: u64) -> u64 {
    if global == 0 {
        return s;
    }
    // splitmix64 finalizer
    let mut z = global.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    s ^ z ^ (z >> 31)
}

/// Parse a literal the way TOML would, falling back to a bare string.
fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Set `a.b.c = value` inside a TOML table, creating intermediate tables.
fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("{key}: {p} is not a table"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Merge a TOML document with `key=value` overrides and validate the result.
    pub fn resolve(document: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match document {
            Some(d) => d.parse().map_err(|e| Error::Config(format!("{e}")))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override must be key=value, got {o:?}")))?;
            set_path(&mut table, k.trim(), parse_literal(v.trim()))?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::resolve(Some(&text), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.encoder.validate(&self.generator)?;
        self.training.validate()?;
        if self.data.n_trajectories > 0 && self.data.trajectory_frames == 0 {
            return Err(Error::Config("data.trajectory_frames must be positive".into()));
        }
        if let Some(f) = self.eval.source_frame {
            if f >= self.data.trajectory_frames {
                return Err(Error::Config(format!(
                    "eval.source_frame {f} is outside a {}-frame trajectory",
                    self.data.trajectory_frames
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(format!("run-{}", &self.hash()[..12]))
    }

    /// Copy with the global seed folded into every component seed.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        let s = self.seed;
        c.generator.seed = mix(s, c.generator.seed);
        c.encoder.seed = mix(s, c.encoder.seed);
        c.data.seed = mix(s, c.data.seed);
        c.training.stage1.seed = mix(s, c.training.stage1.seed);
        c.training.stage2.seed = mix(s, c.training.stage2.seed);
        c.training.stage3.seed = mix(s, c.training.stage3.seed);
        c.training.held_out_seed = mix(s, c.training.held_out_seed);
        c.training.proxy_seed = mix(s, c.training.proxy_seed);
        c.editing.search.seed = mix(s, c.editing.search.seed);
        c
    }

    pub fn source_frame(&self) -> usize {
        self.eval.source_frame.unwrap_or(self.data.trajectory_frames / 2)
    }
}
