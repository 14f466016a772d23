//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "SRICKPT\0"
//! version  u32       1
//! hlen     u32       length of the JSON header
//! header   hlen      {arch, vocab_hash, vocab, params: [{name, shape}], param_count, meta}
//! payload  4 * param_count bytes of f32
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{to_f32_grid, Arch, PolicyModel};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SRICKPT\0";
pub const VERSION: u32 = 1;

/// Header size cap; real headers are a few KiB.
const MAX_HEADER: usize = 16 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Base,
    Instructed,
    Refined,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Base => "base",
            Phase::Instructed => "instructed",
            Phase::Refined => "refined",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: Phase,
    pub step: usize,
    pub val_loss: Option<f64>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ShapeEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: Arch,
    vocab_hash: String,
    vocab: Vocabulary,
    params: Vec<ShapeEntry>,
    param_count: usize,
    meta: CheckpointMeta,
}

/// An immutable parameter snapshot.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub policy: PolicyModel,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn capture(policy: &PolicyModel, meta: CheckpointMeta) -> Self {
        Checkpoint {
            policy: policy.clone(),
            meta,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.policy;
        let header = Header {
            arch: p.arch().clone(),
            vocab_hash: p.vocab().hash(),
            vocab: p.vocab().clone(),
            params: p
                .param_specs()
                .iter()
                .map(|s| ShapeEntry {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                })
                .collect(),
            param_count: p.param_count(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * p.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for &v in p.params() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        if hlen > MAX_HEADER || 16 + hlen > bytes.len() {
            return Err(bad(format!("header length {hlen} exceeds file size {}", bytes.len())));
        }
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])
            .map_err(|e| bad(format!("malformed header: {e}")))?;
        if header.vocab.hash() != header.vocab_hash {
            return Err(bad("vocabulary hash mismatch".into()));
        }
        let payload = &bytes[16 + hlen..];
        if payload.len() % 4 != 0 || payload.len() / 4 != header.param_count {
            return Err(bad(format!(
                "payload holds {} bytes, header declares {} parameters",
                payload.len(),
                header.param_count
            )));
        }
        header.arch.validate().map_err(|e| bad(e.to_string()))?;
        if header.arch.param_count(header.vocab.len()) != Some(header.param_count) {
            return Err(bad(format!(
                "architecture {:?} does not imply {} parameters",
                header.arch, header.param_count
            )));
        }
        let params = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let policy = PolicyModel::from_params(header.arch, header.vocab, params)
            .map_err(|e| bad(e.to_string()))?;
        check_shapes(&policy, &header.params)?;
        Ok(Checkpoint {
            policy,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies the snapshot into an existing model of identical shape.
    pub fn restore_into(&self, model: &mut PolicyModel) -> Result<()> {
        let entries: Vec<ShapeEntry> = self
            .policy
            .param_specs()
            .iter()
            .map(|s| ShapeEntry {
                name: s.name.clone(),
                shape: s.shape.clone(),
            })
            .collect();
        check_shapes(model, &entries)?;
        if model.vocab().hash() != self.policy.vocab().hash() {
            return Err(Error::Checkpoint("vocabulary differs from the model's".into()));
        }
        for (dst, &src) in model.params_mut().iter_mut().zip(self.policy.params()) {
            *dst = to_f32_grid(src);
        }
        Ok(())
    }
}

/// Names the first parameter whose shape differs.
fn check_shapes(model: &PolicyModel, entries: &[ShapeEntry]) -> Result<()> {
    for (i, spec) in model.param_specs().iter().enumerate() {
        match entries.get(i) {
            Some(e) if e.name == spec.name && e.shape == spec.shape => {}
            Some(e) => {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?} in the checkpoint but `{}` {:?} in the model",
                    e.name, e.shape, spec.name, spec.shape
                )))
            }
            None => {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} missing from the checkpoint",
                    spec.name, spec.shape
                )))
            }
        }
    }
    if entries.len() > model.param_specs().len() {
        let extra = &entries[model.param_specs().len()];
        return Err(Error::Checkpoint(format!(
            "checkpoint has extra parameter `{}` {:?}",
            extra.name, extra.shape
        )));
    }
    Ok(())
}
