//! Checkpoint container.
//!
//! Layout:
//!
//! ```text
//! u64 (little-endian)   header length H in bytes
//! H bytes               UTF-8 JSON header
//! ...                   tensor data, little-endian f64, concatenated
//! ```
//!
//! The header is
//! `{"format": "geomshot-checkpoint", "version": 1, "metadata": {...},
//!   "tensors": [{"name", "dtype": "f8", "shape", "byte_offset"}, ...]}`
//! where `byte_offset` is relative to the start of the data section. Tensors
//! are stored in [`EncoderConfig::tensor_names`] order, which includes the
//! BatchNorm running statistics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};

const FORMAT: &str = "geomshot-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub encoder: EncoderConfig,
    /// Dataset the encoder was trained on.
    pub source: Option<String>,
    /// Input representation name, e.g. `angle`.
    pub representation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    byte_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    metadata: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub encoder: Encoder,
}

impl Checkpoint {
    pub fn new(encoder: Encoder, source: Option<String>, representation: Option<String>) -> Self {
        Self {
            meta: CheckpointMeta {
                encoder: *encoder.config(),
                source,
                representation,
            },
            encoder,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        for t in self.encoder.state_tensors() {
            tensors.push(TensorEntry {
                name: t.name.clone(),
                dtype: "f8".into(),
                shape: t.shape.clone(),
                byte_offset: offset,
            });
            offset += t.len() * 8;
        }
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            metadata: self.meta.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.encoder.state_tensors() {
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: String| Error::CorruptCheckpoint(msg);
        if bytes.len() < 8 {
            return Err(corrupt("file shorter than the header length field".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let data_start = 8usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt(format!("declared header length {header_len} exceeds file")))?;
        let header: Header = serde_json::from_slice(&bytes[8..data_start])
            .map_err(|e| corrupt(format!("header is not valid JSON: {e}")))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(corrupt(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }

        let config = header.metadata.encoder;
        config
            .validate()
            .map_err(|e| corrupt(format!("invalid encoder config: {e}")))?;
        let mut encoder = Encoder::zeros(config)?;
        let data = &bytes[data_start..];

        let expected_names = config.tensor_names();
        let listed: Vec<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
        if listed != expected_names.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(corrupt(format!(
                "tensor list {listed:?} does not match the encoder layout"
            )));
        }

        let mut expected_offset = 0;
        for (entry, target) in header.tensors.iter().zip(encoder.state_tensors_mut()) {
            if entry.dtype != "f8" {
                return Err(corrupt(format!("{}: dtype {} is not f8", entry.name, entry.dtype)));
            }
            if entry.shape != target.shape {
                return Err(corrupt(format!(
                    "{}: shape {:?}, expected {:?}",
                    entry.name, entry.shape, target.shape
                )));
            }
            if entry.byte_offset != expected_offset {
                return Err(corrupt(format!(
                    "{}: byte_offset {} but blobs are contiguous at {}",
                    entry.name, entry.byte_offset, expected_offset
                )));
            }
            let len = target.len() * 8;
            let blob = data.get(expected_offset..expected_offset + len).ok_or_else(|| {
                corrupt(format!("{}: blob truncated ({} data bytes)", entry.name, data.len()))
            })?;
            for (v, chunk) in target.values.iter_mut().zip(blob.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            expected_offset += len;
        }
        if expected_offset != data.len() {
            return Err(corrupt(format!(
                "{} trailing bytes after the last tensor",
                data.len() - expected_offset
            )));
        }
        Ok(Self {
            meta: header.metadata,
            encoder,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    checkpoint.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
