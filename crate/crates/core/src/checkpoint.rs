//! Self-describing checkpoint file.
//!
//! Layout: `u64` little-endian header length, a JSON header, then every
//! tensor as little-endian `f32` in header order. The header carries the
//! model config, the vocabulary hash and free-form stage state.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::model::{ModelConfig, ModelError, ModelParams};

pub const CKPT_VERSION: &str = "ckpt-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("vocabulary hash mismatch: checkpoint {found}, expected {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    config: ModelConfig,
    vocab_hash: String,
    state: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab_hash: String,
    /// Additional named tensors such as optimizer moments.
    pub extra: Vec<(String, Tensor)>,
    pub state: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: ModelParams, vocab_hash: impl Into<String>) -> Self {
        Self {
            params,
            vocab_hash: vocab_hash.into(),
            extra: Vec::new(),
            state: serde_json::Value::Null,
        }
    }

    pub fn verify_vocab(&self, expected: &str) -> Result<(), CheckpointError> {
        if self.vocab_hash != expected {
            return Err(CheckpointError::VocabMismatch {
                expected: expected.to_string(),
                found: self.vocab_hash.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let named = self
            .params
            .names()
            .into_iter()
            .zip(&self.params.tensors)
            .chain(self.extra.iter().map(|(n, t)| (n.clone(), t)));
        let mut entries = Vec::new();
        let mut blob = Vec::new();
        let mut offset = 0;
        for (name, t) in named {
            entries.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            version: CKPT_VERSION.to_string(),
            config: self.params.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            state: self.state.clone(),
            tensors: entries,
        };
        let hjson = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + hjson.len() + blob.len());
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let fmt = |m: &str| CheckpointError::Format(m.to_string());
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .ok_or_else(|| fmt("truncated length"))?
            .try_into()
            .unwrap();
        let hlen = u64::from_le_bytes(len_bytes) as usize;
        let hbytes = bytes
            .get(8..8 + hlen)
            .ok_or_else(|| fmt("truncated header"))?;
        let header: Header =
            serde_json::from_slice(hbytes).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if header.version != CKPT_VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported version {}",
                header.version
            )));
        }
        let blob = &bytes[8 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 4;
            let raw = blob
                .get(start..start + n * 4)
                .ok_or_else(|| fmt("tensor data out of bounds"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|e| CheckpointError::Format(e.to_string()))?;
            tensors.push((e.name.clone(), t));
        }
        let n_params = header.config.param_shapes().len();
        if tensors.len() < n_params {
            return Err(fmt("missing parameter tensors"));
        }
        let extra = tensors.split_off(n_params);
        let params = ModelParams::from_tensors(
            header.config,
            tensors.into_iter().map(|(_, t)| t).collect(),
        )?;
        Ok(Self {
            params,
            vocab_hash: header.vocab_hash,
            extra,
            state: header.state,
        })
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_extras() {
        let cfg = ModelConfig::tiny(11);
        let mut ck = Checkpoint::new(ModelParams::init(&cfg, 1).unwrap(), "abc");
        ck.extra
            .push(("adam.m.0".into(), Tensor::full(&[2, 3], 0.5)));
        ck.state = serde_json::json!({"stage": "pretrain", "epochs_done": 3});
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert!(back.verify_vocab("abc").is_ok());
        assert!(matches!(
            back.verify_vocab("xyz"),
            Err(CheckpointError::VocabMismatch { .. })
        ));
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(&[1, 2, 3]).is_err());
        let mut bytes =
            Checkpoint::new(ModelParams::init(&ModelConfig::tiny(5), 0).unwrap(), "h").to_bytes();
        bytes.truncate(bytes.len() - 4);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
