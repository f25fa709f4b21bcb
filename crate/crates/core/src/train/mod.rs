//! The three training stages: null-context pretraining, context fine-tuning
//! with annealed slot masking, and DPO preference calibration.

mod clm;
mod dpo;
mod stage;

pub use clm::{finetune_context, mean_nll, pretrain, shuffle_fragments, EpochStats, Trainer};
pub use dpo::{dpo, dpo_loss, dpo_step, preference_margin};
pub use stage::{run_stage, StageReport, StageRun};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::checkpoint::CheckpointError;
use crate::model::ModelError;
use crate::safe::{parse_safe, SafeMolecule};
use crate::tokenizer::{ContextTriplet, TokenizerError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training data is empty")]
    EmptyCorpus,
    #[error("invalid stage config: {0}")]
    InvalidConfig(String),
    #[error("preference pair {index} has identical molecules")]
    IdenticalPair { index: usize },
    #[error("dpo needs an input checkpoint as reference model")]
    MissingReference,
    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TrainSample {
    pub mol: SafeMolecule,
    pub ctx: ContextTriplet,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PreferencePair {
    pub ctx: ContextTriplet,
    pub preferred: SafeMolecule,
    pub rejected: SafeMolecule,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
    Dpo,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Dpo => "dpo",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            "dpo" => Ok(Stage::Dpo),
            _ => Err(format!("unknown stage {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub clip_norm: Option<f32>,
    /// Per-slot masking probability at the first and last epoch.
    pub mask_anneal: (f64, f64),
    pub shuffle_fragments: bool,
    pub dpo_beta: f64,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::for_stage(Stage::Pretrain)
    }
}

impl StageConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let base = Self {
            lr: 1e-3,
            batch_size: 16,
            epochs: 10,
            warmup_ratio: 0.1,
            clip_norm: Some(1.0),
            mask_anneal: (1.0, 1.0),
            shuffle_fragments: true,
            dpo_beta: 0.1,
            seed: 0,
        };
        match stage {
            Stage::Pretrain => base,
            Stage::Finetune => Self {
                mask_anneal: (0.9, 0.3),
                shuffle_fragments: false,
                ..base
            },
            Stage::Dpo => Self {
                lr: 1e-5,
                shuffle_fragments: false,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !unit(self.warmup_ratio) || !unit(self.mask_anneal.0) || !unit(self.mask_anneal.1) {
            return bad("probabilities and ratios must lie in [0, 1]");
        }
        if !(self.dpo_beta > 0.0 && self.dpo_beta.is_finite()) {
            return bad("dpo_beta must be > 0");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be > 0");
        }
        Ok(())
    }

    /// Masking probability for `epoch` of `self.epochs`, linear in the epoch.
    pub fn mask_prob(&self, epoch: usize) -> f64 {
        let (a, b) = self.mask_anneal;
        if self.epochs <= 1 {
            return a;
        }
        a + (b - a) * epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64
    }
}

#[derive(Deserialize)]
struct SampleRecord {
    safe: String,
    fam: Option<String>,
    tgt: Option<String>,
    moa: Option<String>,
}

#[derive(Deserialize)]
struct PairRecord {
    fam: Option<String>,
    tgt: Option<String>,
    moa: Option<String>,
    pos: String,
    neg: String,
}

pub fn parse_sample_line(line: &str) -> Result<TrainSample, String> {
    let r: SampleRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let mol = parse_safe(&r.safe).map_err(|e| format!("safe: {e}"))?;
    Ok(TrainSample {
        mol,
        ctx: ContextTriplet {
            fam: r.fam,
            tgt: r.tgt,
            moa: r.moa,
        },
    })
}

pub fn parse_pair_line(line: &str) -> Result<PreferencePair, String> {
    let r: PairRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let preferred = parse_safe(&r.pos).map_err(|e| format!("pos: {e}"))?;
    let rejected = parse_safe(&r.neg).map_err(|e| format!("neg: {e}"))?;
    if preferred == rejected {
        return Err("pos and neg are identical".into());
    }
    Ok(PreferencePair {
        ctx: ContextTriplet {
            fam: r.fam,
            tgt: r.tgt,
            moa: r.moa,
        },
        preferred,
        rejected,
    })
}

fn load_lines<T>(path: &Path, parse: fn(&str) -> Result<T, String>) -> Result<Vec<T>, TrainError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(line).map_err(|msg| TrainError::Schema { line: i + 1, msg })?);
    }
    if out.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    Ok(out)
}

/// JSON-lines `{"safe", "fam", "tgt", "moa"}`; null slots stay masked.
pub fn load_samples(path: &Path) -> Result<Vec<TrainSample>, TrainError> {
    load_lines(path, parse_sample_line)
}

/// JSON-lines `{"fam", "tgt", "moa", "pos", "neg"}`.
pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>, TrainError> {
    load_lines(path, parse_pair_line)
}

/// Independent stream seed for (`seed`, `epoch`, `stream`).
pub(crate) fn derive_seed(seed: u64, epoch: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
