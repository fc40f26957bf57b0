//! Checkpoint container: the magic `NEATCKP1`, a little-endian `u32` header
//! length, a JSON header (architecture, tensor table, metadata), then every
//! declared tensor as little-endian `f32` in declaration order.
//!
//! Layer-norm exports use the same container restricted to LN tensors.

use super::encoder::TextEncoder;
use super::params::{Architecture, LnParameterSet};
use crate::{NeatError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NEATCKP1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub steps: usize,
    pub loss_tail: Vec<f64>,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    Full,
    LayerNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: ContainerKind,
    architecture: Architecture,
    tensors: Vec<TensorEntry>,
    meta: TrainingMeta,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub encoder: TextEncoder,
    pub meta: TrainingMeta,
}

fn encode_container(header: &Header, values: impl Iterator<Item = f64>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn decode_container(bytes: &[u8]) -> Result<(Header, Vec<f64>)> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(NeatError::Corrupted("not a checkpoint container".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| NeatError::Corrupted("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.format_version != FORMAT_VERSION {
        return Err(NeatError::VersionMismatch {
            expected: FORMAT_VERSION,
            found: header.format_version,
        });
    }
    let data = &bytes[12 + hlen..];
    let expected: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if data.len() != expected * 4 {
        return Err(NeatError::Corrupted(format!(
            "expected {expected} values, found {} bytes",
            data.len()
        )));
    }
    let values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((header, values))
}

/// Writes through a temporary file and renames, so readers never observe a
/// partially written file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

impl Checkpoint {
    pub fn new(encoder: TextEncoder, meta: TrainingMeta) -> Self {
        Checkpoint { encoder, meta }
    }

    pub fn architecture(&self) -> &Architecture {
        self.encoder.arch()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.encoder.params;
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: ContainerKind::Full,
            architecture: self.encoder.arch().clone(),
            tensors: store
                .tensors
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        encode_container(&header, store.values.iter().copied())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, values) = decode_container(bytes)?;
        if header.kind != ContainerKind::Full {
            return Err(NeatError::invalid(
                "container holds only layer-norm tensors",
            ));
        }
        let encoder = TextEncoder::from_params(header.architecture, values)?;
        let names: Vec<&str> = encoder
            .params
            .tensors
            .iter()
            .map(|t| t.name.as_str())
            .collect();
        let declared: Vec<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
        if names != declared {
            return Err(NeatError::ArchitectureMismatch(
                "tensor table differs from the architecture".into(),
            ));
        }
        Ok(Checkpoint {
            encoder,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(
            self.to_bytes().expect("checkpoint serializes"),
        ))
    }

    pub fn ln_to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.encoder.params;
        let ln: Vec<_> = store.ln_tensors().collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: ContainerKind::LayerNorm,
            architecture: self.encoder.arch().clone(),
            tensors: ln
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        encode_container(
            &header,
            ln.iter()
                .flat_map(|t| store.values[t.range()].iter().copied()),
        )
    }

    /// Returns a copy of `self` whose layer norms come from an LN container.
    pub fn with_ln_from_bytes(&self, bytes: &[u8]) -> Result<Checkpoint> {
        let (header, values) = decode_container(bytes)?;
        if header.kind != ContainerKind::LayerNorm {
            return Err(NeatError::invalid("container is not a layer-norm export"));
        }
        if &header.architecture != self.encoder.arch() {
            return Err(NeatError::ArchitectureMismatch(format!(
                "exported from {:?}, importing into {:?}",
                header.architecture,
                self.encoder.arch()
            )));
        }
        let mut out = self.clone();
        let mut offset = 0;
        let ln: Vec<_> = out.encoder.params.ln_tensors().cloned().collect();
        if ln.len() != header.tensors.len() {
            return Err(NeatError::ArchitectureMismatch(
                "LN tensor count differs".into(),
            ));
        }
        for (t, entry) in ln.iter().zip(&header.tensors) {
            if t.name != entry.name || t.shape != entry.shape {
                return Err(NeatError::ArchitectureMismatch(format!(
                    "tensor {} vs {}",
                    t.name, entry.name
                )));
            }
            out.encoder.params.values[t.range()].copy_from_slice(&values[offset..offset + t.len]);
            offset += t.len;
        }
        out.meta.note = format!("{}; layer norms transplanted", out.meta.note)
            .trim_start_matches("; ")
            .to_string();
        Ok(out)
    }

    pub fn ln_parameters(&self) -> LnParameterSet {
        self.encoder.ln_parameters()
    }
}

pub fn export_ln(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &checkpoint.ln_to_bytes()?)
}

pub fn import_ln(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<Checkpoint> {
    checkpoint.with_ln_from_bytes(&std::fs::read(path)?)
}
