mod attribute;
mod generate;
mod score;
mod train;

use std::path::Path;

use fraglm::checkpoint::Checkpoint;
use fraglm::model::ModelParams;
use fraglm::safe::{parse_safe, SafeMolecule};
use fraglm::tokenizer::{ContextTriplet, Vocabulary};
use serde::Deserialize;
use serde_json::Value;

use crate::config::{require_file, RunConfig};
use crate::error::CliError;
use crate::{Command, ContextArgs};

pub use generate::{bench_batch, BenchRow};

pub fn dispatch(cfg: &RunConfig, command: Command) -> Result<(&'static str, Value), CliError> {
    Ok(match command {
        Command::Synth { out, finetune } => ("synth", train::synth_cmd(&out, finetune, cfg.seed)?),
        Command::Ingest { data } => ("ingest", train::ingest_cmd(&data)?),
        Command::Vocab { data, size, out } => {
            ("vocab", train::vocab_cmd(cfg, &data, size, out.as_deref())?)
        }
        Command::Train {
            stage,
            ckpt,
            out,
            data,
            until,
        } => (
            "train",
            train::train_cmd(
                cfg,
                stage,
                ckpt.as_deref(),
                out.as_deref(),
                data.as_deref(),
                until,
            )?,
        ),
        Command::Generate {
            ckpt,
            n,
            ctx,
            scaffold,
            out,
        } => (
            "generate",
            generate::generate_cmd(cfg, &ckpt, n, &ctx, scaffold.as_deref(), &out)?,
        ),
        Command::Score { ckpt, input, out } => {
            ("score", score::score_cmd(cfg, &ckpt, &input, &out)?)
        }
        Command::Screen { input } => ("screen", score::screen_cmd(cfg, &input)?),
        Command::Classify {
            ckpt,
            input,
            contexts,
            uniform_prior,
        } => (
            "classify",
            score::classify_cmd(cfg, &ckpt, &input, contexts.as_deref(), uniform_prior)?,
        ),
        Command::Cliff {
            ckpt,
            input,
            calibration,
        } => (
            "cliff",
            score::cliff_cmd(cfg, &ckpt, &input, calibration.as_deref())?,
        ),
        Command::Attribute {
            ckpt,
            safe,
            ctx,
            source,
            ref_ckpt,
            universe,
            n,
            pairs,
            joint_context,
            counterfactuals,
            out,
        } => (
            "attribute",
            attribute::attribute_cmd(
                cfg,
                &attribute::AttributeArgs {
                    ckpt: &ckpt,
                    safe: &safe,
                    ctx: &ctx,
                    source,
                    ref_ckpt: ref_ckpt.as_deref(),
                    universe: universe.as_deref(),
                    n,
                    pairs,
                    joint_context,
                    counterfactuals,
                    out: out.as_deref(),
                },
            )?,
        ),
        Command::Bench {
            ckpt,
            batch_sizes,
            runs,
        } => (
            "bench",
            generate::bench_cmd(cfg, &ckpt, &batch_sizes, runs)?,
        ),
    })
}

pub fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary, CliError> {
    let path = require_file(cfg.paths.vocab.as_deref(), "vocabulary")?;
    Ok(Vocabulary::load(&path)?)
}

/// Loads the configured vocabulary and a checkpoint trained on it.
pub fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<(Vocabulary, ModelParams), CliError> {
    let vocab = load_vocab(cfg)?;
    let params = load_params(&vocab, ckpt)?;
    Ok((vocab, params))
}

pub fn load_params(vocab: &Vocabulary, ckpt: &Path) -> Result<ModelParams, CliError> {
    let path = require_file(Some(ckpt), "checkpoint")?;
    let c = Checkpoint::load(&path)?;
    c.verify_vocab(&vocab.hash())?;
    Ok(c.params)
}

impl ContextArgs {
    pub fn triplet(&self) -> ContextTriplet {
        if self.masked {
            return ContextTriplet::null();
        }
        ContextTriplet::new(
            self.fam.as_deref(),
            self.tgt.as_deref(),
            self.moa.as_deref(),
        )
    }
}

/// Reads a JSON-lines file, reporting the first malformed line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path.display().to_string()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| CliError::Schema {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    if out.is_empty() {
        return Err(CliError::EmptyCorpus(path.display().to_string()));
    }
    Ok(out)
}

pub fn parse_at(path: &Path, line: usize, text: &str) -> Result<SafeMolecule, CliError> {
    parse_safe(text).map_err(|e| CliError::Schema {
        path: path.display().to_string(),
        line,
        msg: e.to_string(),
    })
}

/// Molecule record shared by `score` and `classify`.
#[derive(Clone, Debug, Deserialize)]
pub struct MoleculeRecord {
    #[serde(default)]
    pub id: Option<Value>,
    pub safe: String,
    #[serde(default)]
    pub fam: Option<String>,
    #[serde(default)]
    pub tgt: Option<String>,
    #[serde(default)]
    pub moa: Option<String>,
    #[serde(default)]
    pub active: Option<bool>,
}

impl MoleculeRecord {
    pub fn ctx(&self) -> ContextTriplet {
        ContextTriplet::new(
            self.fam.as_deref(),
            self.tgt.as_deref(),
            self.moa.as_deref(),
        )
    }

    /// The given id, or the 1-based record number.
    pub fn id_or(&self, n: usize) -> String {
        match &self.id {
            Some(Value::String(s)) => s.clone(),
            Some(v) => v.to_string(),
            None => n.to_string(),
        }
    }
}

pub fn read_molecules(path: &Path) -> Result<Vec<(MoleculeRecord, SafeMolecule)>, CliError> {
    read_jsonl::<MoleculeRecord>(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let m = parse_at(path, i + 1, &r.safe)?;
            Ok((r, m))
        })
        .collect()
}
