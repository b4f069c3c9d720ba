//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `MPTCKPT\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header with the step,
//! the configuration and a manifest of `(name, shape, offset)` entries, and
//! finally every parameter as little-endian `f64` values. Offsets count
//! scalars from the start of the payload.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::autodiff::Tensor;
use crate::error::{MptError, Result};
use crate::model::{Mpt, MptConfig, ParamStore};

pub const MAGIC: &[u8; 8] = b"MPTCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    step: usize,
    model: MptConfig,
    train: Option<TrainConfig>,
    manifest: Vec<ManifestEntry>,
}

/// Parameters of one model at one step, plus the configuration that built it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub model: MptConfig,
    pub train: Option<TrainConfig>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &Mpt, train: Option<TrainConfig>, step: usize) -> Self {
        Checkpoint {
            step,
            model: model.cfg.clone(),
            train,
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Mpt {
        Mpt {
            cfg: self.model,
            params: self.params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (name, t) in self.params.iter() {
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                offset,
            });
            offset += t.numel();
        }
        let header = serde_json::to_vec(&Header {
            step: self.step,
            model: self.model.clone(),
            train: self.train.clone(),
            manifest,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| MptError::Checkpoint(detail.to_string());
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(MptError::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&r[..len])
            .map_err(|e| MptError::Checkpoint(format!("malformed header: {e}")))?;
        let payload = &r[len..];
        let total: usize = header.manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if payload.len() != 8 * total {
            return Err(MptError::Checkpoint(format!(
                "payload holds {} bytes, manifest needs {}",
                payload.len(),
                8 * total
            )));
        }
        let mut params = ParamStore::new();
        for e in header.manifest {
            let n: usize = e.shape.iter().product();
            if e.offset + n > total {
                return Err(MptError::Checkpoint(format!("entry {} overruns the payload", e.name)));
            }
            let data = payload[8 * e.offset..8 * (e.offset + n)]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| MptError::Checkpoint(format!("{}: {err}", e.name)))?;
            params.insert(e.name, t);
        }
        Ok(Checkpoint {
            step: header.step,
            model: header.model,
            train: header.train,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| MptError::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| MptError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| MptError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            MptError::Checkpoint(d) => MptError::Checkpoint(format!("{}: {d}", path.display())),
            other => other,
        })
    }
}

/// Per-parameter arithmetic mean of `checkpoints`. The result carries the
/// largest step and the configuration of the last checkpoint.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let last = checkpoints
        .last()
        .ok_or_else(|| MptError::Checkpoint("no checkpoints to average".into()))?;
    for c in checkpoints {
        for (name, t) in c.params.iter() {
            match last.params.get(name) {
                Ok(r) if r.shape == t.shape => {}
                Ok(r) => {
                    return Err(MptError::Checkpoint(format!(
                        "parameter {name}: shape {:?} differs from {:?}",
                        t.shape, r.shape
                    )))
                }
                Err(_) => return Err(MptError::Checkpoint(format!("parameter {name} missing from a checkpoint"))),
            }
        }
        if let Some((name, _)) = last.params.iter().find(|(n, _)| c.params.get(n).is_err()) {
            return Err(MptError::Checkpoint(format!("parameter {name} missing from a checkpoint")));
        }
    }
    let k = checkpoints.len() as f64;
    let mut params = ParamStore::new();
    for (name, t) in last.params.iter() {
        let mut sum = vec![0.0; t.numel()];
        for c in checkpoints {
            let src = c.params.get(name)?;
            for (s, v) in sum.iter_mut().zip(&src.data) {
                *s += v;
            }
        }
        let data = sum.into_iter().map(|s| s / k).collect();
        params.insert(name.clone(), Tensor::new(t.shape.clone(), data)?);
    }
    Ok(Checkpoint {
        step: checkpoints.iter().map(|c| c.step).max().unwrap_or(0),
        model: last.model.clone(),
        train: last.train.clone(),
        params,
    })
}
