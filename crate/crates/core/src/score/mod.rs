//! Likelihood-based scoring: normalization strategies, context posteriors,
//! activity-cliff detection, library thresholding and screening metrics.

mod metrics;

pub use metrics::{
    enrichment_factor, enrichment_from_counts, percentile, rank_descending, roc_auc, top_count,
    topk_accuracy,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{sample, sequence_logprob, ModelError, ModelParams, SampleConfig, SampleError};
use crate::safe::SafeMolecule;
use crate::tokenizer::{ContextTriplet, TokenizerError, Vocabulary};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("no population entry for context {0}")]
    MissingPopulation(String),
    #[error("strategy needs the null-context log-likelihood")]
    MissingNullScore,
    #[error("no prior probability for context {0}")]
    MissingPrior(String),
    #[error("candidate set is empty")]
    EmptyCandidateSet,
    #[error("candidate {0} contradicts the known context slots")]
    InconsistentCandidate(String),
    #[error("labels contain a single class")]
    SingleClass,
    #[error("no actives among the labels")]
    NoActives,
    #[error("fraction {0} outside (0, 1]")]
    InvalidAlpha(f64),
    #[error("label universe is empty")]
    EmptyLabelUniverse,
    #[error("input is empty")]
    EmptyInput,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score {index} is not finite")]
    NonFinite { index: usize },
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("all {0} population samples were invalid")]
    AllSamplesInvalid(usize),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Sample(#[from] SampleError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "l")]
    L,
    #[serde(rename = "l_pop")]
    LPop,
    #[serde(rename = "l_null")]
    LNull,
    #[serde(rename = "l_prior")]
    LPrior,
    #[serde(rename = "l_pop_prior")]
    LPopPrior,
    #[serde(rename = "l_null_prior")]
    LNullPrior,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::L,
        Strategy::LPop,
        Strategy::LNull,
        Strategy::LPrior,
        Strategy::LPopPrior,
        Strategy::LNullPrior,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::L => "l",
            Strategy::LPop => "l_pop",
            Strategy::LNull => "l_null",
            Strategy::LPrior => "l_prior",
            Strategy::LPopPrior => "l_pop_prior",
            Strategy::LNullPrior => "l_null_prior",
        }
    }

    pub fn uses_population(self) -> bool {
        matches!(self, Strategy::LPop | Strategy::LPopPrior)
    }

    pub fn uses_null(self) -> bool {
        matches!(self, Strategy::LNull | Strategy::LNullPrior)
    }

    pub fn uses_prior(self) -> bool {
        matches!(
            self,
            Strategy::LPrior | Strategy::LPopPrior | Strategy::LNullPrior
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = ScoreError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ScoreError::UnknownStrategy(s.to_string()))
    }
}

/// Probability of each registered context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextPrior {
    probs: BTreeMap<ContextTriplet, f64>,
}

impl ContextPrior {
    pub fn uniform(contexts: &[ContextTriplet]) -> Result<Self, ScoreError> {
        let set: Vec<&ContextTriplet> = contexts
            .iter()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        if set.is_empty() {
            return Err(ScoreError::EmptyCandidateSet);
        }
        let p = 1.0 / set.len() as f64;
        Ok(Self {
            probs: set.into_iter().map(|c| (c.clone(), p)).collect(),
        })
    }

    /// Frequencies of `observed` over the registered `contexts` with add-one
    /// smoothing; observations outside the registered set are ignored.
    pub fn laplace(
        contexts: &[ContextTriplet],
        observed: &[ContextTriplet],
    ) -> Result<Self, ScoreError> {
        let mut counts: BTreeMap<ContextTriplet, f64> =
            contexts.iter().map(|c| (c.clone(), 1.0)).collect();
        if counts.is_empty() {
            return Err(ScoreError::EmptyCandidateSet);
        }
        for c in observed {
            if let Some(n) = counts.get_mut(c) {
                *n += 1.0;
            }
        }
        let total: f64 = counts.values().sum();
        Ok(Self {
            probs: counts.into_iter().map(|(c, n)| (c, n / total)).collect(),
        })
    }

    pub fn from_probs(probs: BTreeMap<ContextTriplet, f64>) -> Result<Self, ScoreError> {
        if probs.is_empty() {
            return Err(ScoreError::EmptyCandidateSet);
        }
        if probs.values().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(ScoreError::InvalidPrior(
                "probabilities must be positive".into(),
            ));
        }
        let total: f64 = probs.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(ScoreError::InvalidPrior(format!(
                "probabilities sum to {total}"
            )));
        }
        Ok(Self { probs })
    }

    pub fn prob(&self, ctx: &ContextTriplet) -> Option<f64> {
        self.probs.get(ctx).copied()
    }

    pub fn log_prob(&self, ctx: &ContextTriplet) -> Result<f64, ScoreError> {
        self.prob(ctx)
            .map(f64::ln)
            .ok_or_else(|| ScoreError::MissingPrior(ctx.to_string()))
    }

    pub fn contexts(&self) -> impl Iterator<Item = &ContextTriplet> {
        self.probs.keys()
    }

    pub fn total(&self) -> f64 {
        self.probs.values().sum()
    }
}

/// Background statistics of molecules sampled under one context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationEntry {
    pub ctx: ContextTriplet,
    /// Mean log-likelihood of the valid samples.
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
    pub invalid: usize,
    pub seed: u64,
}

pub const DEFAULT_POPULATION: usize = 256;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PopulationCache {
    pub length_normalized: bool,
    pub entries: Vec<PopulationEntry>,
}

impl PopulationCache {
    pub fn get(&self, ctx: &ContextTriplet) -> Option<&PopulationEntry> {
        self.entries.iter().find(|e| &e.ctx == ctx)
    }

    pub fn insert(&mut self, entry: PopulationEntry) {
        self.entries.retain(|e| e.ctx != entry.ctx);
        self.entries.push(entry);
    }
}

/// Mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Seed of the `i`-th draw of a sampling run started with `seed`.
pub fn draw_seed(seed: u64, i: u64) -> u64 {
    let mut z = seed ^ i.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Log-likelihood of `mol` under `ctx`, optionally divided by the number of
/// scored tokens.
pub fn log_likelihood(
    params: &ModelParams,
    vocab: &Vocabulary,
    mol: &SafeMolecule,
    ctx: &ContextTriplet,
    length_normalized: bool,
) -> Result<f64, ScoreError> {
    let seq = vocab.encode(ctx, mol, params.config.max_len)?;
    let lp = sequence_logprob(params, &seq)?;
    Ok(if length_normalized {
        lp / seq.molecular().len() as f64
    } else {
        lp
    })
}

/// Samples `n_samples` molecules under `ctx` and records the mean
/// log-likelihood of those that parse.
pub fn build_population_cache(
    params: &ModelParams,
    vocab: &Vocabulary,
    ctx: &ContextTriplet,
    n_samples: usize,
    seed: u64,
    sampler: &SampleConfig,
    length_normalized: bool,
) -> Result<PopulationEntry, ScoreError> {
    if n_samples == 0 {
        return Err(ScoreError::EmptyInput);
    }
    let prefix = vocab.encode_prefix(ctx)?;
    let mut lps = Vec::with_capacity(n_samples);
    let mut invalid = 0;
    for i in 0..n_samples {
        match sample(
            params,
            vocab,
            &prefix,
            None,
            sampler,
            draw_seed(seed, i as u64),
        ) {
            Ok(m) => match log_likelihood(params, vocab, &m, ctx, length_normalized) {
                Ok(lp) => lps.push(lp),
                Err(_) => invalid += 1,
            },
            Err(SampleError::ParseFailed { .. }) | Err(SampleError::LengthExceeded { .. }) => {
                invalid += 1
            }
            Err(e) => return Err(e.into()),
        }
    }
    if lps.is_empty() {
        return Err(ScoreError::AllSamplesInvalid(invalid));
    }
    let (mean, stderr) = mean_stderr(&lps);
    Ok(PopulationEntry {
        ctx: ctx.clone(),
        mean,
        stderr,
        count: lps.len(),
        invalid,
        seed,
    })
}

/// One normalized score from its ingredients.
pub fn normalize(
    raw_logp: f64,
    ctx: &ContextTriplet,
    strategy: Strategy,
    cache: Option<&PopulationCache>,
    null_logp: Option<f64>,
    prior: Option<&ContextPrior>,
) -> Result<f64, ScoreError> {
    let mut s = raw_logp;
    if strategy.uses_population() {
        let e = cache
            .and_then(|c| c.get(ctx))
            .ok_or_else(|| ScoreError::MissingPopulation(ctx.to_string()))?;
        s -= e.mean;
    }
    if strategy.uses_null() {
        s -= null_logp.ok_or(ScoreError::MissingNullScore)?;
    }
    if strategy.uses_prior() {
        let p = prior.ok_or_else(|| ScoreError::MissingPrior(ctx.to_string()))?;
        s += p.log_prob(ctx)?;
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub mol: SafeMolecule,
    pub ctx: ContextTriplet,
    pub raw_logp: f64,
    pub normalized: BTreeMap<Strategy, f64>,
}

/// Frozen model plus the optional ingredients of the normalized scores.
#[derive(Clone, Copy)]
pub struct Scorer<'a> {
    pub params: &'a ModelParams,
    pub vocab: &'a Vocabulary,
    pub cache: Option<&'a PopulationCache>,
    pub prior: Option<&'a ContextPrior>,
    pub length_normalized: bool,
}

impl<'a> Scorer<'a> {
    pub fn new(params: &'a ModelParams, vocab: &'a Vocabulary) -> Self {
        Self {
            params,
            vocab,
            cache: None,
            prior: None,
            length_normalized: false,
        }
    }

    pub fn logp(&self, mol: &SafeMolecule, ctx: &ContextTriplet) -> Result<f64, ScoreError> {
        log_likelihood(self.params, self.vocab, mol, ctx, self.length_normalized)
    }

    pub fn score(
        &self,
        mol: &SafeMolecule,
        ctx: &ContextTriplet,
        strategies: &[Strategy],
    ) -> Result<ScoredCandidate, ScoreError> {
        let raw = self.logp(mol, ctx)?;
        let null = if strategies.iter().any(|s| s.uses_null()) {
            Some(self.logp(mol, &ContextTriplet::null())?)
        } else {
            None
        };
        let mut normalized = BTreeMap::new();
        for &s in strategies {
            normalized.insert(s, normalize(raw, ctx, s, self.cache, null, self.prior)?);
        }
        Ok(ScoredCandidate {
            mol: mol.clone(),
            ctx: ctx.clone(),
            raw_logp: raw,
            normalized,
        })
    }

    /// Posterior ranking of `candidates` for `mol`, see [`rank_contexts`].
    pub fn classify_context(
        &self,
        mol: &SafeMolecule,
        candidates: &[ContextTriplet],
        known: &ContextTriplet,
    ) -> Result<Vec<ContextScore>, ScoreError> {
        check_candidates(candidates, known)?;
        let lps = candidates
            .iter()
            .map(|c| self.logp(mol, c))
            .collect::<Result<Vec<_>, _>>()?;
        rank_contexts(candidates, &lps, self.prior)
    }

    /// `|log p(x1|c) - log p(x2|c)|`.
    pub fn cliff_score(
        &self,
        x1: &SafeMolecule,
        x2: &SafeMolecule,
        ctx: &ContextTriplet,
    ) -> Result<f64, ScoreError> {
        Ok(cliff_magnitude(self.logp(x1, ctx)?, self.logp(x2, ctx)?))
    }

    pub fn detect_cliff(
        &self,
        x1: &SafeMolecule,
        x2: &SafeMolecule,
        ctx: &ContextTriplet,
        delta: f64,
    ) -> Result<bool, ScoreError> {
        Ok(is_cliff(self.cliff_score(x1, x2, ctx)?, delta))
    }

    /// Pool members whose `strategy` score exceeds `tau`, in pool order.
    pub fn threshold_library(
        &self,
        pool: &[SafeMolecule],
        ctx: &ContextTriplet,
        tau: f64,
        strategy: Strategy,
    ) -> Result<Vec<ScoredCandidate>, ScoreError> {
        let scored = pool
            .iter()
            .map(|m| self.score(m, ctx, &[strategy]))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(threshold_scored(scored, strategy, tau))
    }
}

pub fn cliff_magnitude(lp1: f64, lp2: f64) -> f64 {
    (lp1 - lp2).abs()
}

pub fn is_cliff(score: f64, delta: f64) -> bool {
    score >= delta
}

/// Default cliff threshold: 95th percentile of calibration magnitudes.
pub fn cliff_threshold(calibration: &[f64]) -> Result<f64, ScoreError> {
    percentile(calibration, 95.0)
}

pub fn threshold_scored(
    scored: Vec<ScoredCandidate>,
    strategy: Strategy,
    tau: f64,
) -> Vec<ScoredCandidate> {
    scored
        .into_iter()
        .filter(|c| c.normalized.get(&strategy).is_some_and(|&s| s > tau))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextScore {
    pub ctx: ContextTriplet,
    pub logp: f64,
    pub log_prior: f64,
    /// Normalized over the candidate set.
    pub posterior: f64,
}

fn check_candidates(
    candidates: &[ContextTriplet],
    known: &ContextTriplet,
) -> Result<(), ScoreError> {
    if candidates.is_empty() {
        return Err(ScoreError::EmptyCandidateSet);
    }
    if let Some(c) = candidates.iter().find(|c| !c.consistent_with(known)) {
        return Err(ScoreError::InconsistentCandidate(c.to_string()));
    }
    Ok(())
}

/// Ranks candidates by `log p(x|c) + log p(c)` (uniform prior when `None`);
/// equal scores are ordered by context.
pub fn rank_contexts(
    candidates: &[ContextTriplet],
    logps: &[f64],
    prior: Option<&ContextPrior>,
) -> Result<Vec<ContextScore>, ScoreError> {
    if candidates.is_empty() {
        return Err(ScoreError::EmptyCandidateSet);
    }
    if candidates.len() != logps.len() {
        return Err(ScoreError::LengthMismatch {
            scores: logps.len(),
            labels: candidates.len(),
        });
    }
    let uniform = -(candidates.len() as f64).ln();
    let mut out = candidates
        .iter()
        .zip(logps)
        .map(|(c, &lp)| {
            let log_prior = match prior {
                Some(p) => p.log_prob(c)?,
                None => uniform,
            };
            Ok(ContextScore {
                ctx: c.clone(),
                logp: lp,
                log_prior,
                posterior: 0.0,
            })
        })
        .collect::<Result<Vec<_>, ScoreError>>()?;
    let joint: Vec<f64> = out.iter().map(|s| s.logp + s.log_prior).collect();
    let max = joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = joint.iter().map(|j| (j - max).exp()).sum();
    for (s, j) in out.iter_mut().zip(&joint) {
        s.posterior = (j - max).exp() / z;
    }
    out.sort_by(|a, b| {
        (b.logp + b.log_prior)
            .total_cmp(&(a.logp + a.log_prior))
            .then_with(|| a.ctx.cmp(&b.ctx))
    });
    Ok(out)
}
