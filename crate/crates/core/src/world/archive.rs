//! Binary embedding archive.
//!
//! Layout (all little-endian): the 8-byte magic `NEATEMB1`, `u32` version,
//! `u32` dimension, `u64` record count, `u8` normalized flag, then `count`
//! records of `u64` id followed by `dim` `f32` components.

use crate::{NeatError, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const ARCHIVE_MAGIC: &[u8; 8] = b"NEATEMB1";
pub const ARCHIVE_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8 + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingArchive {
    pub dim: usize,
    pub normalized: bool,
    /// Free-form provenance label; kept in memory only, the wire format has no slot for it.
    pub source: String,
    pub records: Vec<(u64, Vec<f32>)>,
}

impl EmbeddingArchive {
    pub fn new(dim: usize, normalized: bool, source: impl Into<String>) -> Self {
        EmbeddingArchive {
            dim,
            normalized,
            source: source.into(),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, id: u64, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(NeatError::DimensionMismatch {
                expected: self.dim,
                found: v.len(),
            });
        }
        self.records
            .push((id, v.iter().map(|&x| x as f32).collect()));
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (id, v) in &self.records {
            if v.len() != self.dim {
                return Err(NeatError::DimensionMismatch {
                    expected: self.dim,
                    found: v.len(),
                });
            }
            if self.normalized {
                let n = v
                    .iter()
                    .map(|&x| (x as f64) * (x as f64))
                    .sum::<f64>()
                    .sqrt();
                if (n - 1.0).abs() > 1e-5 {
                    return Err(NeatError::Validation(format!(
                        "record {id} has norm {n} but the archive is flagged normalized"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.records.len() * (8 + 4 * self.dim));
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        out.push(self.normalized as u8);
        for (id, v) in &self.records {
            out.extend_from_slice(&id.to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != ARCHIVE_MAGIC {
            return Err(NeatError::NotAnArchive);
        }
        if bytes.len() < HEADER_LEN {
            return Err(NeatError::Corrupted("truncated header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != ARCHIVE_VERSION {
            return Err(NeatError::VersionMismatch {
                expected: ARCHIVE_VERSION,
                found: version,
            });
        }
        let dim = u32_at(12) as usize;
        let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let normalized = match bytes[24] {
            0 => false,
            1 => true,
            other => return Err(NeatError::Corrupted(format!("bad normalized flag {other}"))),
        };
        let record_len = 8 + 4 * dim;
        let expected = (count as u128) * (record_len as u128) + HEADER_LEN as u128;
        if expected != bytes.len() as u128 {
            return Err(NeatError::Corrupted(format!(
                "record count {count} does not match file length {}",
                bytes.len()
            )));
        }
        let mut records = Vec::with_capacity(count as usize);
        for rec in bytes[HEADER_LEN..].chunks_exact(record_len) {
            let id = u64::from_le_bytes(rec[..8].try_into().unwrap());
            let v = rec[8..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push((id, v));
        }
        let archive = EmbeddingArchive {
            dim,
            normalized,
            source: String::new(),
            records,
        };
        archive.validate()?;
        Ok(archive)
    }

    /// Import and additionally require a specific dimension.
    pub fn expect_dim(self, dim: usize) -> Result<Self> {
        if self.dim != dim {
            return Err(NeatError::DimensionMismatch {
                expected: dim,
                found: self.dim,
            });
        }
        Ok(self)
    }
}

pub fn export_embedding_archive(archive: &EmbeddingArchive, path: impl AsRef<Path>) -> Result<()> {
    let bytes = archive.to_bytes()?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn import_embedding_archive(path: impl AsRef<Path>) -> Result<EmbeddingArchive> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    EmbeddingArchive::from_bytes(&bytes)
}
