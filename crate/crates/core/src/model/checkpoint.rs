//! `DMAE v1` checkpoints.
//!
//! ```text
//! magic   8 bytes  "DMAEv1\0\0"
//! u64 LE           header length
//! header           canonical JSON (format_version, config, train_state,
//!                  params, entries with name/shape/offset/length/sha256)
//! payload          concatenated DTNSR tensors; offsets are relative to the
//!                  start of the payload
//! ```
//!
//! Each parameter contributes three entries: its value and both Adam moment
//! buffers, so a resumed run continues exactly.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{DenoMAE, DenoMAEConfig, ModelError};
use crate::numerics::dtnsr::{self, DtnsrError};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DMAEv1\0\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("checksum mismatch for {0}")]
    Checksum(String),
    #[error("parameter layout does not match the configuration: {0}")]
    Layout(String),
    #[error(transparent)]
    Tensor(#[from] DtnsrError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Value,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    role: Role,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
    sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    step_count: u64,
    frozen: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: DenoMAEConfig,
    train_state: serde_json::Value,
    params: Vec<ParamMeta>,
    entries: Vec<Entry>,
}

/// Model weights, optimizer moments and caller-defined training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DenoMAE,
    pub train_state: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: DenoMAE, train_state: serde_json::Value) -> Self {
        Checkpoint { model, train_state }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        let mut params = Vec::new();
        for p in self.model.params.iter() {
            params.push(ParamMeta {
                name: p.name.clone(),
                step_count: p.step_count,
                frozen: p.frozen,
            });
            for (role, t) in [(Role::Value, &p.value), (Role::AdamM, &p.adam_m), (Role::AdamV, &p.adam_v)] {
                let bytes = dtnsr::encode(t);
                entries.push(Entry {
                    name: p.name.clone(),
                    role,
                    shape: t.shape().to_vec(),
                    offset: payload.len() as u64,
                    length: bytes.len() as u64,
                    sha256: hex::encode(Sha256::digest(&bytes)),
                });
                payload.extend_from_slice(&bytes);
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.model.config.clone(),
            train_state: self.train_state.clone(),
            params,
            entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(CheckpointError::Truncated);
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(header.format_version));
        }
        let payload = &body[hlen..];
        let mut model = DenoMAE::new(header.config.clone(), 0)?;
        if header.params.len() != model.params.len() || header.entries.len() != 3 * model.params.len() {
            return Err(CheckpointError::Layout(format!(
                "{} parameters stored, {} expected",
                header.params.len(),
                model.params.len()
            )));
        }
        let mut end = 0u64;
        for (k, (p, meta)) in model.params.iter_mut().zip(&header.params).enumerate() {
            if p.name != meta.name {
                return Err(CheckpointError::Layout(format!("expected {}, found {}", p.name, meta.name)));
            }
            p.step_count = meta.step_count;
            p.frozen = meta.frozen;
            for (j, role) in [Role::Value, Role::AdamM, Role::AdamV].into_iter().enumerate() {
                let e = &header.entries[3 * k + j];
                if e.name != p.name || e.role != role || e.shape != p.value.shape() {
                    return Err(CheckpointError::Layout(format!("entry {} {:?} {:?}", e.name, e.role, e.shape)));
                }
                if e.offset != end {
                    return Err(CheckpointError::Header(format!("entry {} does not follow its predecessor", e.name)));
                }
                end = e.offset + e.length;
                let slice = payload.get(e.offset as usize..end as usize).ok_or(CheckpointError::Truncated)?;
                if hex::encode(Sha256::digest(slice)) != e.sha256 {
                    return Err(CheckpointError::Checksum(format!("{} {:?}", e.name, e.role)));
                }
                let t: Tensor = dtnsr::decode(slice)?;
                if t.shape() != e.shape.as_slice() {
                    return Err(CheckpointError::Layout(format!("payload shape of {}", e.name)));
                }
                match role {
                    Role::Value => p.value = t,
                    Role::AdamM => p.adam_m = t,
                    Role::AdamV => p.adam_v = t,
                }
            }
        }
        if end as usize != payload.len() {
            return Err(CheckpointError::Header("trailing payload bytes".into()));
        }
        Ok(Checkpoint {
            model,
            train_state: header.train_state,
        })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.encode()).map_err(io)?;
        f.sync_all().map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::AdamW;

    fn trained() -> Checkpoint {
        let mut model = DenoMAE::new(DenoMAEConfig::desk(), 3).unwrap();
        for (k, p) in model.params.iter_mut().enumerate() {
            p.grad
                .data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, g)| *g = ((i + k) % 7) as f32 * 0.01 - 0.03);
        }
        model.params.iter_mut().last().unwrap().frozen = true;
        AdamW::with_lr(1e-3).unwrap().step(&mut model.params, true).unwrap();
        Checkpoint::new(model, serde_json::json!({"epoch": 2, "step": 17, "lr": 0.001}))
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = trained();
        let bytes = ck.encode();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back = Checkpoint::decode(&bytes).unwrap();
        // gradients are transient and not stored
        let mut expected = ck.model.params.clone();
        expected.zero_grads();
        assert_eq!(back.model.params, expected);
        assert_eq!(back.model.config, ck.model.config);
        assert_eq!(back.train_state, ck.train_state);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.dmae");
        let b = dir.path().join("b.dmae");
        trained().save(&a).unwrap();
        Checkpoint::load(&a).unwrap().save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = trained().encode();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 0x40;
        assert!(matches!(Checkpoint::decode(&flipped), Err(CheckpointError::Checksum(_))));
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated)
        ));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::decode(&magic), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn header_is_canonical_json() {
        let bytes = trained().encode();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let v: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        assert_eq!(v["format_version"], 1);
        assert_eq!(v["config"]["d_model"], 64);
        assert_eq!(v["entries"][0]["name"], "embed.noisy_const.patch.w");
        assert_eq!(v["entries"][0]["sha256"].as_str().unwrap().len(), 64);
    }
}
