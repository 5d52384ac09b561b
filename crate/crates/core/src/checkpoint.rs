//! Checkpoint files.
//!
//! Layout: 8 magic bytes, one format-version byte, the header length as a
//! little-endian u64, a JSON header (configs, vocabulary, tensor manifest),
//! then every tensor as little-endian f32 in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{DualEncoder, EncoderConfig, TENSOR_NAMES};
use crate::text::Vocabulary;
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 8] = b"ECHOLESS";
pub const FORMAT_VERSION: u8 = 1;

const PREAMBLE: usize = MAGIC.len() + 1 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("checkpoint truncated: needed {needed} bytes, found {available}")]
    Truncated { needed: usize, available: usize },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DualEncoder<f32>,
    pub vocab: Vocabulary,
    pub train: TrainConfig,
    /// Validation average precision when this checkpoint was taken.
    pub validation_ap: f64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u8,
    encoder: EncoderConfig,
    embedding_trainable: bool,
    train: TrainConfig,
    validation_ap: f64,
    vocabulary: Vec<String>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let header = Header {
            format_version: FORMAT_VERSION,
            encoder: self.model.config,
            embedding_trainable: self.model.embedding.trainable,
            train: self.train.clone(),
            validation_ap: self.validation_ap,
            vocabulary: self.vocab.tokens().to_vec(),
            tensors: TENSOR_NAMES
                .iter()
                .zip(self.model.tensors())
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec_pretty(&header).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let floats: usize = self.model.tensors().iter().map(|t| t.len()).sum();
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + 4 * floats);
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.model.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let need = |needed: usize| {
            if bytes.len() < needed {
                Err(CheckpointError::Truncated {
                    needed,
                    available: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(MAGIC.len())?;
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        need(PREAMBLE)?;
        let version = bytes[MAGIC.len()];
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len_bytes: [u8; 8] = bytes[MAGIC.len() + 1..PREAMBLE].try_into().expect("8 bytes");
        let header_len = usize::try_from(u64::from_le_bytes(len_bytes))
            .map_err(|_| CheckpointError::Corrupt("header length overflows".into()))?;
        let header_end = PREAMBLE
            .checked_add(header_len)
            .ok_or_else(|| CheckpointError::Corrupt("header length overflows".into()))?;
        need(header_end)?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        if header.format_version != version {
            return Err(CheckpointError::VersionMismatch {
                found: header.format_version,
                expected: FORMAT_VERSION,
            });
        }
        header
            .encoder
            .validate()
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let vocab = Vocabulary::from_saved(header.vocabulary)
            .ok_or_else(|| CheckpointError::Corrupt("vocabulary lacks reserved entries or has duplicates".into()))?;
        let mut model = DualEncoder::zeros(header.encoder, vocab.len(), header.embedding_trainable);
        if header.tensors.len() != TENSOR_NAMES.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} tensors in manifest, expected {}",
                header.tensors.len(),
                TENSOR_NAMES.len()
            )));
        }
        let mut offset = header_end;
        for ((entry, expected_name), tensor) in header.tensors.iter().zip(TENSOR_NAMES).zip(model.tensors_mut()) {
            if entry.name != expected_name || entry.shape != tensor.shape() {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    entry.name,
                    entry.shape,
                    expected_name,
                    tensor.shape()
                )));
            }
            let end = offset + 4 * tensor.len();
            need(end)?;
            for (v, chunk) in tensor.data_mut().iter_mut().zip(bytes[offset..end].chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
            offset = end;
        }
        if offset != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes after tensor data",
                bytes.len() - offset
            )));
        }
        Ok(Self {
            model,
            vocab,
            train: header.train,
            validation_ap: header.validation_ap,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
