use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, cosine_lr, AdamConfig, AdamState, Tape, Tensor};
use crate::model::{sequence_logprob, ModelParams};
use crate::safe::SafeMolecule;
use crate::tokenizer::{ContextTriplet, Vocabulary};

use super::{derive_seed, Stage, StageConfig, TrainError, TrainSample};

const ORDER_STREAM: u64 = 0;
const FRAGMENT_STREAM: u64 = 1;
const MASK_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Token-weighted mean training loss (CLM) or mean batch loss (DPO).
    pub loss: f64,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
}

/// Parameters plus optimizer state and progress counters.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub params: ModelParams,
    pub adam: AdamState,
    pub epochs_done: usize,
    pub step: usize,
}

impl Trainer {
    pub fn new(params: ModelParams) -> Self {
        let adam = AdamState::new(&params.tensors);
        Self {
            params,
            adam,
            epochs_done: 0,
            step: 0,
        }
    }

    pub(crate) fn lr_now(&self, cfg: &StageConfig, n_items: usize) -> f64 {
        let per_epoch = n_items.div_ceil(cfg.batch_size);
        let total = per_epoch * cfg.epochs;
        let warmup = (cfg.warmup_ratio * total as f64).round() as usize;
        cosine_lr(self.step + 1, warmup, total + 1, cfg.lr)
    }

    pub(crate) fn apply(
        &mut self,
        grads: Vec<Tensor>,
        lr: f64,
        cfg: &StageConfig,
    ) -> Result<(), TrainError> {
        let adam_cfg = AdamConfig {
            lr: lr as f32,
            clip: cfg.clip_norm,
            ..AdamConfig::default()
        };
        adam_step(&mut self.params.tensors, &grads, &mut self.adam, &adam_cfg)?;
        self.step += 1;
        Ok(())
    }

    /// One epoch of next-token training. Pretraining encodes every sample
    /// with the null context; fine-tuning masks each slot independently with
    /// the epoch's annealed probability.
    pub fn clm_epoch(
        &mut self,
        vocab: &Vocabulary,
        data: &[TrainSample],
        cfg: &StageConfig,
        stage: Stage,
    ) -> Result<EpochStats, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let epoch = self.epochs_done;
        let seed = |s| ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, s));
        let (mut order_rng, mut frag_rng, mut mask_rng) =
            (seed(ORDER_STREAM), seed(FRAGMENT_STREAM), seed(MASK_STREAM));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut order_rng);
        let p_mask = cfg.mask_prob(epoch);
        let (mut loss_sum, mut token_sum, mut lr) = (0.0f64, 0usize, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let vars = self.params.register(&mut tape, true);
            let mut total = None;
            let mut tokens = 0;
            for &i in batch {
                let s = &data[i];
                let mol = if cfg.shuffle_fragments {
                    shuffle_fragments(&s.mol, &mut frag_rng)
                } else {
                    s.mol.clone()
                };
                let ctx = match stage {
                    Stage::Pretrain => ContextTriplet::null(),
                    _ => {
                        let draws: [bool; 3] =
                            std::array::from_fn(|_| mask_rng.gen::<f64>() < p_mask);
                        s.ctx.masked(draws)
                    }
                };
                let seq = vocab.encode(&ctx, &mol, self.params.config.max_len)?;
                let (nll, n) = self.params.nll_tape(&mut tape, &vars, &seq)?;
                tokens += n;
                total = Some(match total {
                    None => nll,
                    Some(t) => tape.add(t, nll)?,
                });
            }
            let total = total.expect("non-empty batch");
            loss_sum += tape.value(total).data()[0] as f64;
            token_sum += tokens;
            let loss = tape.scale(total, 1.0 / tokens as f32);
            let mut g = tape.backward(loss)?;
            let grads = vars
                .0
                .iter()
                .map(|&v| g.take(v).expect("param gradient"))
                .collect();
            lr = self.lr_now(cfg, data.len());
            self.apply(grads, lr, cfg)?;
        }
        self.epochs_done += 1;
        Ok(EpochStats {
            epoch,
            loss: loss_sum / token_sum as f64,
            lr,
        })
    }
}

/// Random reordering of the fragments; the fragment multiset is unchanged.
pub fn shuffle_fragments(mol: &SafeMolecule, rng: &mut ChaCha8Rng) -> SafeMolecule {
    let mut order: Vec<usize> = (0..mol.len()).collect();
    order.shuffle(rng);
    mol.permuted(&order)
        .expect("permutation of fragment indices")
}

fn run_clm(
    params: ModelParams,
    vocab: &Vocabulary,
    data: &[TrainSample],
    cfg: &StageConfig,
    stage: Stage,
) -> Result<(ModelParams, Vec<EpochStats>), TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut t = Trainer::new(params);
    let mut stats = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        stats.push(t.clm_epoch(vocab, data, cfg, stage)?);
    }
    Ok((t.params, stats))
}

/// Stage 1: every molecule is encoded under the null context.
pub fn pretrain(
    params: ModelParams,
    vocab: &Vocabulary,
    corpus: &[SafeMolecule],
    cfg: &StageConfig,
) -> Result<(ModelParams, Vec<EpochStats>), TrainError> {
    let data: Vec<TrainSample> = corpus
        .iter()
        .map(|m| TrainSample {
            mol: m.clone(),
            ctx: ContextTriplet::null(),
        })
        .collect();
    run_clm(params, vocab, &data, cfg, Stage::Pretrain)
}

/// Stage 2: context-conditioned training with annealed random slot masking.
pub fn finetune_context(
    params: ModelParams,
    vocab: &Vocabulary,
    data: &[TrainSample],
    cfg: &StageConfig,
) -> Result<(ModelParams, Vec<EpochStats>), TrainError> {
    run_clm(params, vocab, data, cfg, Stage::Finetune)
}

/// Summed molecular-token NLL and token count over `data`, each sample under
/// its own context (or the null context when `null_ctx`).
pub fn mean_nll(
    params: &ModelParams,
    vocab: &Vocabulary,
    data: &[TrainSample],
    null_ctx: bool,
) -> Result<(f64, usize), TrainError> {
    let (mut total, mut tokens) = (0.0, 0);
    for s in data {
        let ctx = if null_ctx {
            ContextTriplet::null()
        } else {
            s.ctx.clone()
        };
        let seq = vocab.encode(&ctx, &s.mol, params.config.max_len)?;
        total -= sequence_logprob(params, &seq)?;
        tokens += seq.molecular().len();
    }
    Ok((total, tokens))
}
