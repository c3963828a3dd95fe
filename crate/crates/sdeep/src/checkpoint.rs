//! Binary checkpoints: model config, preprocessing metadata, RNG state and
//! every parameter tensor, bit-exact.
//!
//! Layout:
//!
//! ```text
//! magic   8  bytes  "SDEEPCK1"
//! length  u64 LE    header byte count
//! header  JSON      config, pipeline metadata, epoch, loss bits, RNG state,
//!                   parameter names and shapes (sorted by name)
//! payload f64 LE    parameter data, concatenated in header order
//! ```
//!
//! Losses are stored as raw IEEE-754 bits and parameters as little-endian
//! bit patterns, so `save -> load -> save` reproduces the file byte for
//! byte and a loaded model evaluates identically to the one saved.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError};
use crate::tensor::Tensor;
use crate::train::TrainOutcome;

pub const MAGIC: &[u8; 8] = b"SDEEPCK1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("unsupported checkpoint version {found}, expected {VERSION}")]
    UnsupportedVersion { found: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct ParamDesc {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    pipeline: serde_json::Value,
    epoch: usize,
    best_val_loss_bits: u64,
    rng_seed: Vec<u8>,
    rng_word_pos_lo: u64,
    rng_word_pos_hi: u64,
    params: Vec<ParamDesc>,
}

/// A complete, restorable training artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Preprocessing metadata (channel names, scaling ranges, groups...)
    /// that evaluation re-applies so inputs are transformed identically.
    pub pipeline: serde_json::Value,
    /// 1-based epoch whose parameters these are.
    pub epoch: usize,
    pub best_val_loss: f64,
    /// Seed of the training random stream.
    pub rng_seed: [u8; 32],
    /// Position of the stream when training finished.
    pub rng_word_pos: u128,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Packages a finished training run together with the preprocessing
    /// metadata evaluation will need.
    pub fn from_outcome(outcome: &TrainOutcome, pipeline: serde_json::Value) -> Self {
        Checkpoint {
            config: outcome.model.config().clone(),
            pipeline,
            epoch: outcome.best_epoch,
            best_val_loss: outcome.best_val_loss,
            rng_seed: outcome.rng_seed,
            rng_word_pos: outcome.rng_word_pos,
            params: outcome.model.params().clone(),
        }
    }

    /// Rebuilds the model, verifying parameters against the config.
    pub fn to_model(&self) -> Result<Model, ModelError> {
        Model::from_parts(self.config.clone(), self.params.clone())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let header = Header {
            version: VERSION,
            config: self.config.clone(),
            pipeline: self.pipeline.clone(),
            epoch: self.epoch,
            best_val_loss_bits: self.best_val_loss.to_bits(),
            rng_seed: self.rng_seed.to_vec(),
            rng_word_pos_lo: self.rng_word_pos as u64,
            rng_word_pos_hi: (self.rng_word_pos >> 64) as u64,
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamDesc {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header_bytes =
            serde_json::to_vec(&header).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;

        let payload_len: usize = self.params.values().map(|t| t.numel() * 8).sum();
        let mut bytes = Vec::with_capacity(MAGIC.len() + 8 + header_bytes.len() + payload_len);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header_bytes);
        for tensor in self.params.values() {
            for &v in tensor.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path)?;
        let corrupt = |msg: &str| CheckpointError::Corrupt(msg.to_string());

        if bytes.len() < MAGIC.len() + 8 {
            return Err(corrupt("file shorter than the fixed prelude"));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut pos = MAGIC.len();
        let header_len =
            u64::from_le_bytes(bytes[pos..pos + 8].try_into().expect("8 bytes")) as usize;
        pos += 8;
        if bytes.len() < pos + header_len {
            return Err(corrupt("header extends past end of file"));
        }
        let header: Header = serde_json::from_slice(&bytes[pos..pos + header_len])
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        pos += header_len;
        if header.version != VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: header.version,
            });
        }
        let rng_seed: [u8; 32] = header
            .rng_seed
            .as_slice()
            .try_into()
            .map_err(|_| corrupt("rng seed is not 32 bytes"))?;

        let mut params = BTreeMap::new();
        for desc in &header.params {
            let numel = crate::tensor::numel_of(&desc.shape);
            let byte_len = numel * 8;
            if bytes.len() < pos + byte_len {
                return Err(corrupt(&format!(
                    "payload truncated inside parameter {}",
                    desc.name
                )));
            }
            let data: Vec<f64> = bytes[pos..pos + byte_len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            pos += byte_len;
            let tensor = Tensor::new(data, &desc.shape)
                .map_err(|e| CheckpointError::Corrupt(format!("parameter {}: {e}", desc.name)))?;
            if params.insert(desc.name.clone(), tensor).is_some() {
                return Err(corrupt(&format!("duplicate parameter {}", desc.name)));
            }
        }
        if pos != bytes.len() {
            return Err(corrupt("trailing bytes after payload"));
        }

        Ok(Checkpoint {
            config: header.config,
            pipeline: header.pipeline,
            epoch: header.epoch,
            best_val_loss: f64::from_bits(header.best_val_loss_bits),
            rng_seed,
            rng_word_pos: (header.rng_word_pos_lo as u128)
                | ((header.rng_word_pos_hi as u128) << 64),
            params,
        })
    }
}
