use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::model::{sequence_logprob, ModelParams, ParamVars};
use crate::tokenizer::{TokenSequence, Vocabulary};

use super::clm::{EpochStats, Trainer};
use super::{derive_seed, PreferencePair, StageConfig, TrainError};

const ORDER_STREAM: u64 = 0;

fn encode_pair(
    vocab: &Vocabulary,
    pair: &PreferencePair,
    max_len: usize,
) -> Result<(TokenSequence, TokenSequence), TrainError> {
    Ok((
        vocab.encode(&pair.ctx, &pair.preferred, max_len)?,
        vocab.encode(&pair.ctx, &pair.rejected, max_len)?,
    ))
}

fn check_pairs(pairs: &[PreferencePair]) -> Result<(), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    match pairs.iter().position(|p| p.preferred == p.rejected) {
        Some(index) => Err(TrainError::IdenticalPair { index }),
        None => Ok(()),
    }
}

/// Tape NLLs of the preferred and rejected molecule.
fn pair_nll(
    params: &ModelParams,
    tape: &mut Tape,
    vars: &ParamVars,
    vocab: &Vocabulary,
    pair: &PreferencePair,
) -> Result<(Var, Var), TrainError> {
    let (pos, neg) = encode_pair(vocab, pair, params.config.max_len)?;
    let (a, _) = params.nll_tape(tape, vars, &pos)?;
    let (b, _) = params.nll_tape(tape, vars, &neg)?;
    Ok((a, b))
}

/// Reference NLLs through the same tape arithmetic as the policy, so an
/// unchanged policy yields a log-ratio of exactly zero.
fn reference_nll(
    reference: &ModelParams,
    vocab: &Vocabulary,
    pairs: &[PreferencePair],
) -> Result<Vec<(f32, f32)>, TrainError> {
    pairs
        .iter()
        .map(|pair| {
            let mut tape = Tape::new();
            let vars = reference.register(&mut tape, false);
            let (a, b) = pair_nll(reference, &mut tape, &vars, vocab, pair)?;
            Ok((tape.value(a).data()[0], tape.value(b).data()[0]))
        })
        .collect()
}

/// Per-pair loss `-log σ(β·Δ)` on the tape, where Δ is the policy-minus-reference
/// log-ratio of preferred over rejected.
fn pair_loss(
    params: &ModelParams,
    tape: &mut Tape,
    vars: &ParamVars,
    vocab: &Vocabulary,
    pair: &PreferencePair,
    reference: (f32, f32),
    beta: f32,
) -> Result<Var, TrainError> {
    let (pos, neg) = pair_nll(params, tape, vars, vocab, pair)?;
    let d = tape.sub(neg, pos)?;
    let z = tape.scale(d, beta);
    let z = tape.add_scalar(z, -(beta * (reference.1 - reference.0)));
    let ls = tape.log_sigmoid(z);
    Ok(tape.scale(ls, -1.0))
}

/// Mean DPO loss of `params` against `reference` over `pairs`.
pub fn dpo_loss(
    params: &ModelParams,
    reference: &ModelParams,
    vocab: &Vocabulary,
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<f64, TrainError> {
    check_pairs(pairs)?;
    let refs = reference_nll(reference, vocab, pairs)?;
    let mut total = 0.0;
    for (pair, &r) in pairs.iter().zip(&refs) {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let l = pair_loss(params, &mut tape, &vars, vocab, pair, r, beta as f32)?;
        total += tape.value(l).data()[0] as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Mean DPO loss over `batch` and its gradient with respect to `params`.
/// The reference model only contributes constants.
pub fn dpo_step(
    params: &ModelParams,
    reference: &ModelParams,
    vocab: &Vocabulary,
    batch: &[PreferencePair],
    beta: f64,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let refs = dpo_reference(reference, vocab, batch)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let mut total = None;
    for (pair, &r) in batch.iter().zip(&refs) {
        let l = pair_loss(params, &mut tape, &vars, vocab, pair, r, beta as f32)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let loss = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f32);
    let value = tape.value(loss).data()[0] as f64;
    let mut g = tape.backward(loss)?;
    Ok((
        value,
        vars.0
            .iter()
            .map(|&v| g.take(v).expect("param gradient"))
            .collect(),
    ))
}

/// `log p(preferred | ctx) - log p(rejected | ctx)`.
pub fn preference_margin(
    params: &ModelParams,
    vocab: &Vocabulary,
    pair: &PreferencePair,
) -> Result<f64, TrainError> {
    let (pos, neg) = encode_pair(vocab, pair, params.config.max_len)?;
    Ok(sequence_logprob(params, &pos)? - sequence_logprob(params, &neg)?)
}

impl Trainer {
    /// One epoch of preference optimisation; `reference` holds the frozen
    /// model's (preferred, rejected) NLL per pair.
    pub fn dpo_epoch(
        &mut self,
        vocab: &Vocabulary,
        pairs: &[PreferencePair],
        reference: &[(f32, f32)],
        cfg: &StageConfig,
    ) -> Result<EpochStats, TrainError> {
        check_pairs(pairs)?;
        let epoch = self.epochs_done;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, ORDER_STREAM));
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let beta = cfg.dpo_beta as f32;
        let (mut loss_sum, mut lr) = (0.0f64, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let vars = self.params.register(&mut tape, true);
            let mut total = None;
            for &i in batch {
                let l = pair_loss(
                    &self.params,
                    &mut tape,
                    &vars,
                    vocab,
                    &pairs[i],
                    reference[i],
                    beta,
                )?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            let total = total.expect("non-empty batch");
            loss_sum += tape.value(total).data()[0] as f64;
            let loss = tape.scale(total, 1.0 / batch.len() as f32);
            let mut g = tape.backward(loss)?;
            let grads = vars
                .0
                .iter()
                .map(|&v| g.take(v).expect("param gradient"))
                .collect();
            lr = self.lr_now(cfg, pairs.len());
            self.apply(grads, lr, cfg)?;
        }
        self.epochs_done += 1;
        Ok(EpochStats {
            epoch,
            loss: loss_sum / pairs.len() as f64,
            lr,
        })
    }
}

pub(crate) fn dpo_reference(
    reference: &ModelParams,
    vocab: &Vocabulary,
    pairs: &[PreferencePair],
) -> Result<Vec<(f32, f32)>, TrainError> {
    check_pairs(pairs)?;
    reference_nll(reference, vocab, pairs)
}

/// Stage 3: preference calibration against a frozen copy of `reference`.
pub fn dpo(
    params: ModelParams,
    reference: &ModelParams,
    vocab: &Vocabulary,
    pairs: &[PreferencePair],
    cfg: &StageConfig,
) -> Result<(ModelParams, Vec<EpochStats>), TrainError> {
    cfg.validate()?;
    let refs = dpo_reference(reference, vocab, pairs)?;
    let mut t = Trainer::new(params);
    let mut stats = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        stats.push(t.dpo_epoch(vocab, pairs, &refs, cfg)?);
    }
    Ok((t.params, stats))
}
