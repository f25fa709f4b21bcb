//! LLaMA-style decoder: RMSNorm pre-normalization, rotary attention, SwiGLU
//! feed-forward and an untied output head.
//!
//! Parameter tensors are kept in a fixed order: `tok_emb`, then per layer
//! `attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down`, then
//! `final_norm, lm_head`. Projections are stored `[d_in, d_out]`.

mod decoder;
mod sample;

pub use decoder::{forward, sequence_logprob, token_logprobs, Decoder};
pub use sample::{generate_tokens, sample, Generation, SampleConfig, SampleError};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Reduction, Tape, Tensor, Var};
use crate::tokenizer::{TokenSequence, PAD_ID};

pub const INIT_STD: f32 = 0.02;
pub const PARAMS_PER_LAYER: usize = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("empty input sequence")]
    EmptySequence,
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("boundary {boundary} invalid for a sequence of {len} tokens")]
    InvalidBoundary { boundary: usize, len: usize },
    #[error("parameter tensors do not match the config: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub rope_base: f32,
}

impl ModelConfig {
    /// Two-layer desk model used by tests and the toy experiments.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            n_heads: 4,
            n_layers: 2,
            d_model: 32,
            d_ff: 64,
            vocab_size,
            max_len: 512,
            rope_base: 10_000.0,
        }
    }

    /// 12 heads, 6 layers, hidden 384, intermediate 512.
    pub fn xs(vocab_size: usize) -> Self {
        Self {
            n_heads: 12,
            n_layers: 6,
            d_model: 384,
            d_ff: 512,
            ..Self::tiny(vocab_size)
        }
    }

    /// 16 heads, 8 layers, hidden 512, intermediate 1024.
    pub fn sm(vocab_size: usize) -> Self {
        Self {
            n_heads: 16,
            n_layers: 8,
            d_model: 512,
            d_ff: 1024,
            ..Self::tiny(vocab_size)
        }
    }

    /// 16 heads, 16 layers, hidden 512, intermediate 1024.
    pub fn base(vocab_size: usize) -> Self {
        Self {
            n_layers: 16,
            ..Self::sm(vocab_size)
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny(vocab_size)),
            "xs" => Some(Self::xs(vocab_size)),
            "sm" => Some(Self::sm(vocab_size)),
            "base" => Some(Self::base(vocab_size)),
            _ => None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return bad("dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!(
                "head dim {} must be even for rotary encoding",
                self.head_dim()
            ));
        }
        if self.max_len < 8 {
            return bad(format!("max_len {} must be at least 8", self.max_len));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return bad(format!("rope_base {} must exceed 1", self.rope_base));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out = vec![("tok_emb".to_string(), vec![v, d])];
        for l in 0..self.n_layers {
            for (name, shape) in [
                ("attn_norm", vec![d]),
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("ffn_norm", vec![d]),
                ("w_gate", vec![d, f]),
                ("w_up", vec![d, f]),
                ("w_down", vec![f, d]),
            ] {
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.push(("final_norm".to_string(), vec![d]));
        out.push(("lm_head".to_string(), vec![d, v]));
        out
    }

    /// Closed form: `2Vd + d + L(4d² + 3d·d_ff + 2d)`.
    pub fn param_count(&self) -> usize {
        let (d, f, v, l) = (self.d_model, self.d_ff, self.vocab_size, self.n_layers);
        2 * v * d + d + l * (4 * d * d + 3 * d * f + 2 * d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor>,
}

/// Tape variables for one registration of the parameters.
pub struct ParamVars(pub Vec<Var>);

impl ModelParams {
    /// Normal(0, 0.02) weights, unit norm gains; `wo` and `w_down` are further
    /// scaled by `1/sqrt(2 n_layers)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let resid = 1.0 / ((2 * config.n_layers.max(1)) as f32).sqrt();
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with("norm") {
                    Tensor::ones(&shape)
                } else if name.ends_with(".wo") || name.ends_with(".w_down") {
                    Tensor::randn(&shape, INIT_STD * resid, &mut rng)
                } else {
                    Tensor::randn(&shape, INIT_STD, &mut rng)
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != tensors.len() {
            return Err(ModelError::ParamMismatch(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParamMismatch(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn names(&self) -> Vec<String> {
        self.config
            .param_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub(crate) fn layer(&self, l: usize) -> &[Tensor] {
        let base = 1 + l * PARAMS_PER_LAYER;
        &self.tensors[base..base + PARAMS_PER_LAYER]
    }

    /// Records every tensor as a leaf; `trainable` controls gradient tracking.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        ParamVars(
            self.tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
        )
    }

    pub(crate) fn check_ids(&self, ids: &[usize]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if ids.len() > self.config.max_len {
            return Err(ModelError::SequenceTooLong {
                len: ids.len(),
                max_len: self.config.max_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits `[T, V]` recorded on `tape`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        ids: &[usize],
    ) -> Result<Var, ModelError> {
        self.check_ids(ids)?;
        let cfg = &self.config;
        let p = &vars.0;
        let dh = cfg.head_dim();
        let att_scale = 1.0 / (dh as f32).sqrt();
        let mut x = tape.embedding(p[0], ids)?;
        for l in 0..cfg.n_layers {
            let w = &p[1 + l * PARAMS_PER_LAYER..1 + (l + 1) * PARAMS_PER_LAYER];
            let h = tape.rmsnorm(x, w[0])?;
            let q = tape.matmul(h, w[1])?;
            let q = tape.rope(q, cfg.n_heads, cfg.rope_base)?;
            let k = tape.matmul(h, w[2])?;
            let k = tape.rope(k, cfg.n_heads, cfg.rope_base)?;
            let v = tape.matmul(h, w[3])?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, head * dh, dh)?;
                let kh = tape.slice_cols(k, head * dh, dh)?;
                let vh = tape.slice_cols(v, head * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let s = tape.matmul(qh, kt)?;
                let s = tape.scale(s, att_scale);
                let s = tape.causal_mask(s)?;
                let a = tape.softmax_lastdim(s);
                heads.push(tape.matmul(a, vh)?);
            }
            let att = tape.concat_cols(&heads)?;
            let o = tape.matmul(att, w[4])?;
            x = tape.add(x, o)?;
            let h2 = tape.rmsnorm(x, w[5])?;
            let gate = tape.matmul(h2, w[6])?;
            let gate = tape.silu(gate);
            let up = tape.matmul(h2, w[7])?;
            let act = tape.mul(gate, up)?;
            let down = tape.matmul(act, w[8])?;
            x = tape.add(x, down)?;
        }
        let n = p.len();
        let hf = tape.rmsnorm(x, p[n - 2])?;
        Ok(tape.matmul(hf, p[n - 1])?)
    }

    /// Summed next-token NLL of the molecular part of `seq` (positions at or
    /// after `boundary`, pads excluded) and the number of scored tokens.
    pub fn nll_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        seq: &TokenSequence,
    ) -> Result<(Var, usize), ModelError> {
        let ids = &seq.ids;
        if seq.boundary == 0 || seq.boundary >= ids.len() {
            return Err(ModelError::InvalidBoundary {
                boundary: seq.boundary,
                len: ids.len(),
            });
        }
        let logits = self.forward_tape(tape, vars, &ids[..ids.len() - 1])?;
        let targets = &ids[1..];
        let mask: Vec<bool> = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| i + 1 >= seq.boundary && t != PAD_ID)
            .collect();
        let count = mask.iter().filter(|&&m| m).count();
        let loss = tape.cross_entropy(logits, targets, &mask, Reduction::Sum)?;
        Ok((loss, count))
    }
}
