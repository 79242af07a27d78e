//! Checkpoint file: magic `IVE1`, a `u32` little-endian header length, the
//! UTF-8 JSON header, then little-endian `f32` blobs. Header offsets are
//! relative to the first blob byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::DiTConfig;
use crate::data::io::{write_atomic, BlobRef};
use crate::error::{Error, Result};
use crate::params::sha256_hex;
use crate::predict_update::AblationMode;
use crate::rng::RngState;
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::LogEntry;

pub const MAGIC: &[u8; 4] = b"IVE1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub trainable: bool,
    pub blob: BlobRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentEntry {
    pub name: String,
    pub m: BlobRef,
    pub v: BlobRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: u32,
    config: TrainConfig,
    dit: DiTConfig,
    mode: Option<AblationMode>,
    step: u64,
    adam_t: u64,
    rng: RngState,
    frozen_digests: BTreeMap<String, String>,
    log: Vec<LogEntry>,
    losses: Vec<f32>,
    tensors: Vec<TensorEntry>,
    moments: Vec<MomentEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub name: String,
    pub m: Tensor,
    pub v: Tensor,
}

/// Everything needed to continue training bitwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub dit: DiTConfig,
    pub mode: Option<AblationMode>,
    pub step: u64,
    pub adam_t: u64,
    pub rng: RngState,
    /// Digests of the frozen tensors when this training phase began.
    pub frozen_digests: BTreeMap<String, String>,
    pub log: Vec<LogEntry>,
    /// Loss of every completed step.
    pub losses: Vec<f32>,
    pub tensors: Vec<NamedTensor>,
    pub moments: Vec<Moments>,
}

fn push(bytes: &mut Vec<u8>, t: &Tensor) -> BlobRef {
    let raw = t.to_le_bytes();
    let r = BlobRef {
        offset: bytes.len() as u64,
        len: raw.len() as u64,
        shape: t.shape().to_vec(),
        crc32: crc32fast::hash(&raw),
    };
    bytes.extend_from_slice(&raw);
    r
}

fn read(name: &str, r: &BlobRef, blobs: &[u8]) -> Result<Tensor> {
    let need = r.shape.iter().product::<usize>() * 4;
    if r.len as usize != need {
        return Err(Error::CorruptCheckpoint(format!(
            "{name}: length {} for shape {:?}",
            r.len, r.shape
        )));
    }
    let start = r.offset as usize;
    let end = start
        .checked_add(need)
        .filter(|&e| e <= blobs.len())
        .ok_or(Error::TruncatedBlob {
            name: name.to_string(),
            needed: start.saturating_add(need),
            available: blobs.len(),
        })?;
    let raw = &blobs[start..end];
    let actual = crc32fast::hash(raw);
    if actual != r.crc32 {
        return Err(Error::ChecksumMismatch {
            name: name.to_string(),
            expected: r.crc32,
            actual,
        });
    }
    Tensor::from_le_bytes(r.shape.clone(), raw)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs = Vec::new();
        let tensors = self
            .tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                trainable: t.trainable,
                blob: push(&mut blobs, &t.value),
            })
            .collect();
        let moments = self
            .moments
            .iter()
            .map(|mo| MomentEntry {
                name: mo.name.clone(),
                m: push(&mut blobs, &mo.m),
                v: push(&mut blobs, &mo.v),
            })
            .collect();
        let header = Header {
            format: FORMAT_VERSION,
            config: self.config.clone(),
            dit: self.dit.clone(),
            mode: self.mode,
            step: self.step,
            adam_t: self.adam_t,
            rng: self.rng.clone(),
            frozen_digests: self.frozen_digests.clone(),
            log: self.log.clone(),
            losses: self.losses.clone(),
            tensors,
            moments,
        };
        let json = serde_json::to_vec(&header)?;
        let len = u32::try_from(json.len()).map_err(|_| Error::CorruptCheckpoint("header too large".into()))?;
        let mut out = Vec::with_capacity(8 + json.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::CorruptCheckpoint("missing IVE1 magic".into()));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = &bytes[8..];
        if body.len() < len {
            return Err(Error::CorruptCheckpoint(format!(
                "header needs {len} bytes, file has {}",
                body.len()
            )));
        }
        let header: Header =
            serde_json::from_slice(&body[..len]).map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
        if header.format != FORMAT_VERSION {
            return Err(Error::CorruptCheckpoint(format!(
                "unsupported format {}",
                header.format
            )));
        }
        let blobs = &body[len..];
        let tensors = header
            .tensors
            .iter()
            .map(|e| {
                Ok(NamedTensor {
                    name: e.name.clone(),
                    trainable: e.trainable,
                    value: read(&e.name, &e.blob, blobs)?,
                })
            })
            .collect::<Result<_>>()?;
        let moments = header
            .moments
            .iter()
            .map(|e| {
                Ok(Moments {
                    name: e.name.clone(),
                    m: read(&format!("{}.m", e.name), &e.m, blobs)?,
                    v: read(&format!("{}.v", e.name), &e.v, blobs)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: header.config,
            dit: header.dit,
            mode: header.mode,
            step: header.step,
            adam_t: header.adam_t,
            rng: header.rng,
            frozen_digests: header.frozen_digests,
            log: header.log,
            losses: header.losses,
            tensors,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}
