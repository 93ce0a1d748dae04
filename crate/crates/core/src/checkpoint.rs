//! Model checkpoints.
//!
//! ```text
//! "HSMAECK1"              8 bytes
//! header length           u64 little-endian
//! header                  UTF-8 JSON (CheckpointHeader)
//! payload                 f64 little-endian, arrays in `Weights::visit` order
//! ```
//!
//! The header lists every array name and shape in payload order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HSMAECK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub p: usize,
    pub q: usize,
    pub k: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Spectral groups of the cubes the model was trained on.
    pub k: usize,
    pub seed: u64,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            p: self.params.grid.0,
            q: self.params.grid.1,
            k: self.k,
            n_classes: self.params.n_classes(),
            seed: self.seed,
            tensors: self
                .params
                .named()
                .into_iter()
                .map(|(name, t)| TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.params.n_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.named() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format(8, "header length exceeds file"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::format(16, format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::format(
                16,
                format!("unsupported format version {}", header.format_version),
            ));
        }
        let mut params = init_params(&header.config, header.p, header.q, header.n_classes, 0)
            .map_err(|e| Error::format(16, e.to_string()))?;
        let expected: Vec<TensorEntry> = params
            .named()
            .into_iter()
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect();
        if expected != header.tensors {
            return Err(Error::format(16, "tensor table does not match the configuration"));
        }
        let mut pos = header_end;
        for t in params.fields_mut() {
            let n = t.len();
            let end = pos + 8 * n;
            if end > bytes.len() {
                return Err(Error::format(pos, "truncated parameter payload"));
            }
            for (v, chunk) in t.data_mut().iter_mut().zip(bytes[pos..end].chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            pos = end;
        }
        if pos != bytes.len() {
            return Err(Error::format(pos, "trailing bytes after payload"));
        }
        Ok(Self {
            config: header.config,
            k: header.k,
            seed: header.seed,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let config = ModelConfig::micro();
        Checkpoint {
            params: init_params(&config, 3, 2, 4, 17).unwrap(),
            config,
            k: 3,
            seed: 17,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let header = back.header();
        assert_eq!((header.p, header.q, header.k, header.n_classes), (3, 2, 3, 4));
    }

    #[test]
    fn payload_is_little_endian_in_visit_order() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let first = f64::from_le_bytes(bytes[16 + hlen..24 + hlen].try_into().unwrap());
        assert_eq!(first, ck.params.patch_proj.weight.data()[0]);
        assert_eq!(bytes.len(), 16 + hlen + 8 * ck.params.n_params());
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    }
}
