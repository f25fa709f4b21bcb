use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Tensor};
use crate::checkpoint::Checkpoint;
use crate::model::{ModelConfig, ModelParams};
use crate::tokenizer::Vocabulary;

use super::clm::{mean_nll, Trainer};
use super::dpo::{dpo_loss, dpo_reference};
use super::{load_pairs, load_samples, Stage, StageConfig, TrainError};

/// Everything one invocation of a training stage needs.
#[derive(Clone, Debug)]
pub struct StageRun<'a> {
    pub stage: Stage,
    pub data: &'a Path,
    pub vocab: &'a Vocabulary,
    pub cfg: StageConfig,
    /// Architecture for a fresh model when there is no input checkpoint.
    pub model: ModelConfig,
    pub init_seed: u64,
    pub ckpt_in: Option<&'a Path>,
    pub ckpt_out: &'a Path,
    /// Stop once this many epochs are complete, leaving a resumable checkpoint.
    pub until: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub epochs: usize,
    /// Per-token NLL over the stage data (CLM stages) or mean DPO loss.
    pub final_loss: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StageState {
    stage: Stage,
    seed: u64,
    epochs_done: usize,
    step: usize,
    adam_step: u64,
}

enum Data {
    Samples(Vec<super::TrainSample>),
    Pairs(Vec<super::PreferencePair>),
}

fn tensors_named(
    extra: &[(String, Tensor)],
    prefix: &str,
    n: usize,
) -> Result<Vec<Tensor>, TrainError> {
    (0..n)
        .map(|i| {
            let name = format!("{prefix}.{i}");
            extra
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| {
                    TrainError::InvalidConfig(format!("resume checkpoint lacks tensor {name}"))
                })
        })
        .collect()
}

fn save(
    run: &StageRun,
    trainer: &Trainer,
    reference: Option<&ModelParams>,
) -> Result<(), TrainError> {
    let mut ck = Checkpoint::new(trainer.params.clone(), run.vocab.hash());
    for (i, (m, v)) in trainer.adam.m.iter().zip(&trainer.adam.v).enumerate() {
        ck.extra.push((format!("adam.m.{i}"), m.clone()));
        ck.extra.push((format!("adam.v.{i}"), v.clone()));
    }
    if let Some(r) = reference {
        for (i, t) in r.tensors.iter().enumerate() {
            ck.extra.push((format!("ref.{i}"), t.clone()));
        }
    }
    let state = StageState {
        stage: run.stage,
        seed: run.cfg.seed,
        epochs_done: trainer.epochs_done,
        step: trainer.step,
        adam_step: trainer.adam.step,
    };
    ck.state = serde_json::to_value(state).expect("state serializes");
    ck.save(run.ckpt_out)?;
    Ok(())
}

/// Runs (or resumes) one stage, checkpointing after every epoch.
///
/// An input checkpoint written by an unfinished run of the same stage and
/// seed is resumed with its optimizer state; any other input checkpoint
/// supplies the starting weights (and, for DPO, the frozen reference).
pub fn run_stage(run: &StageRun) -> Result<StageReport, TrainError> {
    let start = Instant::now();
    let cfg = &run.cfg;
    cfg.validate()?;
    let data = match run.stage {
        Stage::Dpo => Data::Pairs(load_pairs(run.data)?),
        _ => Data::Samples(load_samples(run.data)?),
    };
    let loaded = match run.ckpt_in {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.verify_vocab(&run.vocab.hash())?;
            Some(ck)
        }
        None => None,
    };
    if run.stage == Stage::Dpo && loaded.is_none() {
        return Err(TrainError::MissingReference);
    }

    let resume = loaded.as_ref().and_then(|ck| {
        serde_json::from_value::<StageState>(ck.state.clone())
            .ok()
            .filter(|s| s.stage == run.stage && s.seed == cfg.seed && s.epochs_done < cfg.epochs)
    });
    let (mut trainer, reference) = match (loaded, resume) {
        (Some(ck), Some(state)) => {
            let n = ck.params.tensors.len();
            let adam = AdamState {
                m: tensors_named(&ck.extra, "adam.m", n)?,
                v: tensors_named(&ck.extra, "adam.v", n)?,
                step: state.adam_step,
            };
            let reference = match run.stage {
                Stage::Dpo => Some(ModelParams::from_tensors(
                    ck.params.config.clone(),
                    tensors_named(&ck.extra, "ref", n)?,
                )?),
                _ => None,
            };
            let trainer = Trainer {
                params: ck.params,
                adam,
                epochs_done: state.epochs_done,
                step: state.step,
            };
            (trainer, reference)
        }
        (Some(ck), None) => {
            let reference = (run.stage == Stage::Dpo).then(|| ck.params.clone());
            (Trainer::new(ck.params), reference)
        }
        (None, _) => {
            let mut mc = run.model.clone();
            mc.vocab_size = run.vocab.len();
            (Trainer::new(ModelParams::init(&mc, run.init_seed)?), None)
        }
    };
    if trainer.params.config.vocab_size != run.vocab.len() {
        return Err(TrainError::InvalidConfig(format!(
            "model vocabulary {} differs from tokenizer vocabulary {}",
            trainer.params.config.vocab_size,
            run.vocab.len()
        )));
    }

    let refs = match (&data, &reference) {
        (Data::Pairs(p), Some(r)) => dpo_reference(r, run.vocab, p)?,
        _ => Vec::new(),
    };
    let stop = run.until.unwrap_or(cfg.epochs).min(cfg.epochs);
    while trainer.epochs_done < stop {
        match &data {
            Data::Samples(s) => trainer.clm_epoch(run.vocab, s, cfg, run.stage)?,
            Data::Pairs(p) => trainer.dpo_epoch(run.vocab, p, &refs, cfg)?,
        };
        save(run, &trainer, reference.as_ref())?;
    }
    if trainer.epochs_done == 0 {
        save(run, &trainer, reference.as_ref())?;
    }

    let final_loss = match (&data, &reference) {
        (Data::Samples(s), _) => {
            let (total, tokens) =
                mean_nll(&trainer.params, run.vocab, s, run.stage == Stage::Pretrain)?;
            total / tokens as f64
        }
        (Data::Pairs(p), Some(r)) => dpo_loss(&trainer.params, r, run.vocab, p, cfg.dpo_beta)?,
        (Data::Pairs(_), None) => unreachable!("dpo always has a reference"),
    };
    Ok(StageReport {
        stage: run.stage,
        epochs: trainer.epochs_done,
        final_loss,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
