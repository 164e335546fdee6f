//! Versioned container for named arrays plus a JSON metadata record.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, `u64` header
//! length, a JSON header (kind, step, metadata, tensor names and shapes) and
//! then every tensor's values as little-endian `f64` in header order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SDFCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub step: u64,
    pub metadata: Map<String, Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    step: u64,
    metadata: Map<String, Value>,
    tensors: Vec<(String, Vec<usize>)>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.to_string(), step: 0, metadata: Map::new(), tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn insert_params(&mut self, ps: &ParamSet) {
        self.tensors.extend(ps.to_named());
    }

    pub fn insert_all(&mut self, named: BTreeMap<String, Tensor>) {
        self.tensors.extend(named);
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::State(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::State(format!("checkpoint has no array {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            step: self.step,
            metadata: self.metadata.clone(),
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let n_values: usize = self.tensors.values().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt(path, "not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(
                path,
                format!("unsupported checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"),
            ));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| corrupt(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
        let mut off = 20 + hlen;
        let mut tensors = BTreeMap::new();
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            let raw = bytes
                .get(off..off + 8 * n)
                .ok_or_else(|| corrupt(path, format!("truncated data for {name}")))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.insert(name, Tensor::new(&shape, data));
            off += 8 * n;
        }
        if off != bytes.len() {
            return Err(corrupt(path, format!("{} trailing bytes", bytes.len() - off)));
        }
        Ok(Self { kind: header.kind, step: header.step, metadata: header.metadata, tensors })
    }

    /// Write atomically (temporary file + rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| corrupt(path, e.to_string()))?;
        Self::from_bytes(&bytes, path)
    }
}
