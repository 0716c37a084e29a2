//! Binary checkpoint container.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! offset  size         field
//! 0       8            magic "KVAECKPT"
//! 8       4            format version (u32, currently 1)
//! 12      8            config length n (u64)
//! 20      n            model config, JSON (UTF-8)
//!         4            tensor count (u32)
//!         per tensor:
//!           4          name length m (u32)
//!           m          name (UTF-8)
//!           4          rank r (u32)
//!           8·r        dimensions (u64 each)
//!           8·Πdims    payload, row-major f64
//!         8            metadata length k (u64)
//!         k            metadata, JSON (UTF-8)
//!         32           SHA-256 of every preceding byte
//! ```
//!
//! Model tensors come first in [`ModelParams::visit`] order. Optimizer
//! moments, when present, follow as `adam.first.<name>` and
//! `adam.second.<name>`; the Adam step counter lives in the metadata.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::objective::ObjectiveConfig;
use crate::optim::AdamState;
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 8] = b"KVAECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint digest mismatch")]
    DigestMismatch,
    #[error("invalid checkpoint JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("tensor table: {0}")]
    Tensor(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Training position and history carried alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub class_names: Vec<String>,
    pub objective: Option<ObjectiveConfig>,
    pub train: Option<TrainConfig>,
    /// Mean training loss per completed epoch.
    pub train_loss: Vec<f64>,
    /// Validation loss per completed epoch.
    pub val_loss: Vec<f64>,
    pub best_val: Option<EpochScore>,
    pub best_agreement: Option<EpochScore>,
    /// Hex SHA-256 of `train_loss` then `val_loss` as little-endian f64.
    pub history_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochScore {
    pub epoch: usize,
    pub value: f64,
}

impl CheckpointMeta {
    pub fn compute_history_digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.train_loss.iter().chain(&self.val_loss) {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
    pub meta: CheckpointMeta,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.params.config)?;
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);

        let specs = self.params.tensor_specs();
        let count = specs.len() * if self.optimizer.is_some() { 3 } else { 1 };
        out.extend_from_slice(&(count as u32).to_le_bytes());
        self.params
            .visit(|name, shape, data| put_tensor(&mut out, name, shape, data));
        if let Some(adam) = &self.optimizer {
            if adam.first.len() != self.params.num_params() || adam.second.len() != self.params.num_params() {
                return Err(CheckpointError::Tensor(
                    "optimizer moments do not match the parameters".into(),
                ));
            }
            for (prefix, flat) in [("adam.first", &adam.first), ("adam.second", &adam.second)] {
                let mut offset = 0;
                for (name, shape) in &specs {
                    let n: usize = shape.iter().product();
                    put_tensor(&mut out, &format!("{prefix}.{name}"), shape, &flat[offset..offset + n]);
                    offset += n;
                }
            }
        }

        let mut meta = self.meta.clone();
        meta.history_digest = meta.compute_history_digest();
        if let Some(adam) = &self.optimizer {
            meta.step = adam.step;
        }
        let meta = serde_json::to_vec(&meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() + 32 {
            return Err(if bytes.starts_with(MAGIC) {
                CheckpointError::Truncated
            } else {
                CheckpointError::BadMagic
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::DigestMismatch);
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let len = r.u64()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(len)?)?;
        let mut params = ModelParams::zeros(&config)?;

        let count = r.u32()? as usize;
        let mut tensors: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Tensor("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or(CheckpointError::Truncated)?;
            let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if tensors.insert(name.clone(), (shape, data)).is_some() {
                return Err(CheckpointError::Tensor(format!("duplicate tensor {name}")));
            }
        }
        let len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)?;
        if r.pos != body.len() {
            return Err(CheckpointError::Tensor("trailing bytes after metadata".into()));
        }

        let take = |tensors: &mut HashMap<String, (Vec<usize>, Vec<f64>)>,
                    name: &str,
                    shape: &[usize]|
         -> Result<Vec<f64>, CheckpointError> {
            let (found, data) = tensors
                .remove(name)
                .ok_or_else(|| CheckpointError::Tensor(format!("missing tensor {name}")))?;
            if found != shape {
                return Err(CheckpointError::Tensor(format!(
                    "tensor {name} has shape {found:?}, expected {shape:?}"
                )));
            }
            Ok(data)
        };
        let specs = params.tensor_specs();
        let mut flat = Vec::with_capacity(params.num_params());
        for (name, shape) in &specs {
            flat.extend(take(&mut tensors, name, shape)?);
        }
        params.set_flat(&flat);
        let optimizer = if tensors.is_empty() {
            None
        } else {
            let mut moments = Vec::new();
            for prefix in ["adam.first", "adam.second"] {
                let mut m = Vec::with_capacity(flat.len());
                for (name, shape) in &specs {
                    m.extend(take(&mut tensors, &format!("{prefix}.{name}"), shape)?);
                }
                moments.push(m);
            }
            if let Some(name) = tensors.keys().next() {
                return Err(CheckpointError::Tensor(format!("unexpected tensor {name}")));
            }
            let second = moments.pop().expect("two moments");
            let first = moments.pop().expect("two moments");
            Some(AdamState {
                first,
                second,
                step: meta.step,
            })
        };
        Ok(Self {
            params,
            optimizer,
            meta,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Write to a sibling temporary file, sync it, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes()?)?;
        Ok(())
    }
}

/// Replace `path` with `bytes` so readers see either the old or the new file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        // Persist the rename itself; not every platform can open a directory.
        if let Ok(d) = fs::File::open(dir) {
            let _ = d.sync_all();
        }
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let out = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
