//! Fragment attribution by single-fragment replacement.
//!
//! `ψ_i = log p(x|c) - E[log p(x with f_i replaced|c)]`, the expectation
//! running over replacements drawn under the null context given the rest of
//! the molecule. Pairwise terms and counterfactual search reuse the same
//! replacement sampler.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{generate_tokens, Decoder, ModelError, ModelParams, SampleConfig, SampleError};
use crate::safe::{
    remove_fragment, substitute_fragment, token_similarity, Fragment, SafeError, SafeMolecule,
};
use crate::score::{draw_seed, log_likelihood, mean_stderr, ScoreError};
use crate::tokenizer::{ContextTriplet, TokenizerError, Vocabulary, EOS_ID};

#[derive(Debug, Error)]
pub enum AttributeError {
    #[error("only {valid} of {needed} required replacements were valid after {attempts} attempts")]
    TooFewValidReplacements {
        valid: usize,
        needed: usize,
        attempts: usize,
    },
    #[error("no candidate reaches |Δ| >= {delta}; best was {best:?}")]
    NoFeasibleCandidate { delta: f64, best: Option<f64> },
    #[error("fragment indices must differ")]
    SameIndex,
    #[error("invalid attribution config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Safe(#[from] SafeError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// Where replacement fragments come from. Generative sources condition on the
/// rest of the molecule under the null context.
#[derive(Clone, Copy, Debug)]
pub enum ReplacementSource<'a> {
    /// The scoring model itself.
    NullContext,
    /// A separate model, typically the pretrained checkpoint.
    Pretrained(&'a ModelParams),
    /// A fixed candidate set, each member weighted by the scoring model's
    /// null-context probability of emitting it in place of `f_i`.
    Universe(&'a [Fragment]),
}

impl ReplacementSource<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            ReplacementSource::NullContext => "null_context",
            ReplacementSource::Pretrained(_) => "pretrained_model",
            ReplacementSource::Universe(_) => "universe",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionConfig {
    pub n: usize,
    pub n_min: usize,
    /// Attempts allowed per requested replacement.
    pub attempt_factor: usize,
    pub sampler: SampleConfig,
    pub seed: u64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            n: 64,
            n_min: 16,
            attempt_factor: 20,
            sampler: SampleConfig {
                max_new: 64,
                ..SampleConfig::default()
            },
            seed: 0,
        }
    }
}

impl AttributionConfig {
    fn validate(&self) -> Result<(), AttributeError> {
        if self.n == 0 || self.attempt_factor == 0 {
            return Err(AttributeError::InvalidConfig(
                "n and attempt_factor must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn needed(&self) -> usize {
        self.n_min.min(self.n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplacementSample {
    pub fragment: String,
    /// `log p(x|c) - log p(x'|c)`.
    pub delta_logp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FragmentAttribution {
    pub index: usize,
    pub text: String,
    pub psi: f64,
    pub stderr: f64,
    pub n: usize,
    pub attempts: usize,
    pub source: String,
    pub seed: u64,
    pub samples: Vec<ReplacementSample>,
}

/// Draws replacement fragments for one slot of one molecule.
pub struct ReplacementSampler<'a> {
    source: ReplacementSource<'a>,
    params: &'a ModelParams,
    vocab: &'a Vocabulary,
    original: Fragment,
    prefix: Vec<usize>,
    universe: Vec<(Fragment, f64)>,
}

impl<'a> ReplacementSampler<'a> {
    pub fn new(
        params: &'a ModelParams,
        vocab: &'a Vocabulary,
        mol: &SafeMolecule,
        index: usize,
        source: ReplacementSource<'a>,
    ) -> Result<Self, AttributeError> {
        let original = mol
            .fragments()
            .get(index)
            .cloned()
            .ok_or(SafeError::IndexOutOfRange {
                index,
                len: mol.len(),
            })?;
        let mut prefix = vocab.encode_prefix(&ContextTriplet::null())?.ids;
        if mol.len() > 1 {
            let rest = remove_fragment(mol, index)?;
            prefix.extend(vocab.encode_molecule(&rest)?);
            prefix.push(vocab.separator_id());
        }
        let mut s = Self {
            source,
            params,
            vocab,
            original,
            prefix,
            universe: Vec::new(),
        };
        if let ReplacementSource::Universe(frags) = source {
            s.universe = s.universe_weights(frags)?;
        }
        Ok(s)
    }

    /// Probability of each compatible universe member, normalized over them.
    fn universe_weights(&self, frags: &[Fragment]) -> Result<Vec<(Fragment, f64)>, AttributeError> {
        let mut out = Vec::new();
        for f in frags {
            if f.open_sites() != self.original.open_sites() {
                continue;
            }
            let ids = self
                .vocab
                .encode_molecule(&SafeMolecule::from_fragments(vec![f.clone()])?)?;
            let mut dec = Decoder::new(self.params);
            let mut logits = dec.feed(&self.prefix)?;
            let mut lp = 0.0;
            for &id in &ids {
                lp += log_softmax_at(&logits, &[id]);
                logits = dec.step(id)?;
            }
            lp += log_softmax_at(&logits, &[EOS_ID, self.vocab.separator_id()]);
            out.push((f.clone(), lp));
        }
        let max = out
            .iter()
            .map(|(_, l)| *l)
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = out.iter().map(|(_, l)| (l - max).exp()).sum();
        for (_, w) in out.iter_mut() {
            *w = (*w - max).exp() / z;
        }
        Ok(out)
    }

    /// Normalized weights of the universe source (empty for generative sources).
    pub fn universe(&self) -> &[(Fragment, f64)] {
        &self.universe
    }

    pub fn original(&self) -> &Fragment {
        &self.original
    }

    /// One draw; `None` when the draw is not a valid replacement.
    pub fn draw(
        &self,
        rng: &mut ChaCha8Rng,
        cfg: &SampleConfig,
    ) -> Result<Option<Fragment>, AttributeError> {
        let gen_params = match self.source {
            ReplacementSource::NullContext => self.params,
            ReplacementSource::Pretrained(p) => p,
            ReplacementSource::Universe(_) => {
                if self.universe.is_empty() {
                    return Ok(None);
                }
                let mut u = rng.gen::<f64>();
                for (f, w) in &self.universe {
                    if u < *w {
                        return Ok(Some(f.clone()));
                    }
                    u -= w;
                }
                return Ok(Some(self.universe[self.universe.len() - 1].0.clone()));
            }
        };
        if self.prefix.len() >= gen_params.config.max_len {
            return Ok(None);
        }
        let sep = self.vocab.separator_id();
        let vocab = self.vocab;
        let allowed = |id: usize| id == EOS_ID || vocab.is_structural(id);
        let g = generate_tokens(gen_params, &self.prefix, &allowed, &[EOS_ID, sep], cfg, rng)?;
        if g.stop.is_none() || g.ids.is_empty() {
            return Ok(None);
        }
        let text = self.vocab.decode_molecular(&g.ids)?;
        Ok(Fragment::parse(&text)
            .ok()
            .filter(|f| f.open_sites() == self.original.open_sites()))
    }

    /// Up to `cfg.n` valid replacements within `cfg.n * cfg.attempt_factor`
    /// attempts; returns them with the number of attempts used.
    pub fn collect(
        &self,
        cfg: &AttributionConfig,
        seed: u64,
    ) -> Result<(Vec<Fragment>, usize), AttributeError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max_attempts = cfg.n * cfg.attempt_factor;
        let mut out = Vec::with_capacity(cfg.n);
        let mut attempts = 0;
        while out.len() < cfg.n && attempts < max_attempts {
            attempts += 1;
            if let Some(f) = self.draw(&mut rng, &cfg.sampler)? {
                out.push(f);
            }
        }
        if out.len() < cfg.needed() {
            return Err(AttributeError::TooFewValidReplacements {
                valid: out.len(),
                needed: cfg.needed(),
                attempts,
            });
        }
        Ok((out, attempts))
    }
}

fn log_softmax_at(logits: &[f32], ids: &[usize]) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let z: f64 = logits.iter().map(|&l| (l as f64 - max).exp()).sum();
    let p: f64 = ids.iter().map(|&i| (logits[i] as f64 - max).exp()).sum();
    (p / z).ln()
}

/// Seed of the sample set for fragment slot `index`.
fn slot_seed(seed: u64, index: usize) -> u64 {
    draw_seed(seed, index as u64)
}

/// ψ from a list of replacement fragments for slot `index`.
pub fn psi_from_replacements(
    params: &ModelParams,
    vocab: &Vocabulary,
    mol: &SafeMolecule,
    ctx: &ContextTriplet,
    index: usize,
    replacements: &[Fragment],
) -> Result<(f64, f64, Vec<ReplacementSample>), AttributeError> {
    let base = log_likelihood(params, vocab, mol, ctx, false)?;
    let mut samples = Vec::with_capacity(replacements.len());
    for f in replacements {
        let x = substitute_fragment(mol, index, f)?;
        let lp = log_likelihood(params, vocab, &x, ctx, false)?;
        samples.push(ReplacementSample {
            fragment: f.text(),
            delta_logp: base - lp,
        });
    }
    let deltas: Vec<f64> = samples.iter().map(|s| s.delta_logp).collect();
    let (psi, stderr) = mean_stderr(&deltas);
    Ok((psi, stderr, samples))
}

pub fn attribute_fragment(
    params: &ModelParams,
    vocab: &Vocabulary,
    mol: &SafeMolecule,
    ctx: &ContextTriplet,
    index: usize,
    source: ReplacementSource,
    cfg: &AttributionConfig,
) -> Result<FragmentAttribution, AttributeError> {
    cfg.validate()?;
    let sampler = ReplacementSampler::new(params, vocab, mol, index, source)?;
    let (reps, attempts) = sampler.collect(cfg, slot_seed(cfg.seed, index))?;
    let (psi, stderr, samples) = psi_from_replacements(params, vocab, mol, ctx, index, &reps)?;
    Ok(FragmentAttribution {
        index,
        text: sampler.original().text(),
        psi,
        stderr,
        n: samples.len(),
        attempts,
        source: source.name().to_string(),
        seed: cfg.seed,
        samples,
    })
}

/// ψ for every fragment of `mol`.
pub fn attribute_molecule(
    params: &ModelParams,
    vocab: &Vocabulary,
    mol: &SafeMolecule,
    ctx: &ContextTriplet,
    source: ReplacementSource,
    cfg: &AttributionConfig,
) -> Result<Vec<FragmentAttribution>, AttributeError> {
    (0..mol.len())
        .map(|i| attribute_fragment(params, vocab, mol, ctx, i, source, cfg))
        .collect()
}

/// Exact ψ under the universe source: the weighted mean over all compatible
/// members instead of a Monte-Carlo mean.
pub fn exhaustive_psi(
    params: &ModelParams,
    vocab: &Vocabulary,
    mol: &SafeMolecule,
    ctx: &ContextTriplet,
    index: usize,
    universe: &[Fragment],
) -> Result<f64, AttributeError> {
    let sampler = ReplacementSampler::new(
        params,
        vocab,
        mol,
        index,
        ReplacementSource::Universe(universe),
    )?;
    let base = log_likelihood(params, vocab, mol, ctx, false)?;
    let mut e = 0.0;
    for (f, w) in sampler.universe() {
        let x = substitute_fragment(mol, index, f)?;
        e += w * log_likelihood(params, vocab, &x, ctx, false)?;
    }
    Ok(base - e)
}

/// Context under which the joint replacement term is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointContext {
    /// The null context, as the pairwise formula is written.
    Null,
    /// The molecule's own context, matching the single-fragment terms.
    Given,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAttribution {
    pub i: usize,
    pub j: usize,
    pub psi_ij: f64,
    /// Standard error of `ψ_ij` over the paired draws.
    pub stderr: f64,
    /// `log p(x|c) - E[log p(x with f_i, f_j replaced)]`.
    pub joint: f64,
    pub psi_i: f64,
    pub psi_j: f64,
    pub n: usize,
    pub joint_context: JointContext,
}

/// `ψ_ij = joint - ψ_i - ψ_j`; each slot's samples depend only on the slot
/// and the seed, so the result is symmetric in `i` and `j`.
pub fn attribute_pair(
    params: &ModelParams,
    vocab: &Vocabulary,
    mol: &SafeMolecule,
    ctx: &ContextTriplet,
    i: usize,
    j: usize,
    source: ReplacementSource,
    cfg: &AttributionConfig,
    joint_context: JointContext,
) -> Result<PairAttribution, AttributeError> {
    cfg.validate()?;
    if i == j {
        return Err(AttributeError::SameIndex);
    }
    let (a, b) = (i.min(j), i.max(j));
    let reps_a = ReplacementSampler::new(params, vocab, mol, a, source)?
        .collect(cfg, slot_seed(cfg.seed, a))?
        .0;
    let reps_b = ReplacementSampler::new(params, vocab, mol, b, source)?
        .collect(cfg, slot_seed(cfg.seed, b))?
        .0;
    let n = reps_a.len().min(reps_b.len());
    let (psi_a, _, sa) = psi_from_replacements(params, vocab, mol, ctx, a, &reps_a[..n])?;
    let (psi_b, _, sb) = psi_from_replacements(params, vocab, mol, ctx, b, &reps_b[..n])?;
    let base = log_likelihood(params, vocab, mol, ctx, false)?;
    let joint_ctx = match joint_context {
        JointContext::Null => ContextTriplet::null(),
        JointContext::Given => ctx.clone(),
    };
    let mut joint_terms = Vec::with_capacity(n);
    let mut per_draw = Vec::with_capacity(n);
    for k in 0..n {
        let x = substitute_fragment(&substitute_fragment(mol, a, &reps_a[k])?, b, &reps_b[k])?;
        let d = base - log_likelihood(params, vocab, &x, &joint_ctx, false)?;
        joint_terms.push(d);
        per_draw.push(d - sa[k].delta_logp - sb[k].delta_logp);
    }
    let joint = joint_terms.iter().sum::<f64>() / n as f64;
    let (_, stderr) = mean_stderr(&per_draw);
    let (psi_i, psi_j) = if i == a {
        (psi_a, psi_b)
    } else {
        (psi_b, psi_a)
    };
    Ok(PairAttribution {
        i,
        j,
        psi_ij: joint - (psi_a + psi_b),
        stderr,
        joint,
        psi_i,
        psi_j,
        n,
        joint_context,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterfactual {
    pub mol: SafeMolecule,
    pub index: usize,
    /// `log p(x'|c) - log p(x|c)`.
    pub delta_logp: f64,
    pub similarity: f64,
}

/// Feasible candidates (`|Δ| >= delta`, distinct from `original`, first
/// occurrence of each molecule) sorted by similarity, then |Δ|, both
/// descending, then by SAFE string.
pub fn rank_counterfactuals(
    original: &SafeMolecule,
    pool: Vec<Counterfactual>,
    delta: f64,
) -> Result<Vec<Counterfactual>, AttributeError> {
    let mut seen = BTreeSet::new();
    let mut best: Option<f64> = None;
    let mut out = Vec::new();
    for c in pool {
        if c.mol == *original || !seen.insert(c.mol.serialize()) {
            continue;
        }
        best = Some(best.map_or(c.delta_logp.abs(), |b: f64| b.max(c.delta_logp.abs())));
        if c.delta_logp.abs() >= delta {
            out.push(c);
        }
    }
    if out.is_empty() {
        return Err(AttributeError::NoFeasibleCandidate { delta, best });
    }
    out.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then(b.delta_logp.abs().total_cmp(&a.delta_logp.abs()))
            .then_with(|| a.mol.serialize().cmp(&b.mol.serialize()))
    });
    Ok(out)
}

/// Single-fragment substitutions drawn round-robin over the fragments, with
/// replacements generated under `ctx` (`sample_under_ctx`) or the null context.
pub fn counterfactual_candidates(
    params: &ModelParams,
    vocab: &Vocabulary,
    mol: &SafeMolecule,
    ctx: &ContextTriplet,
    n_candidates: usize,
    sample_under_ctx: bool,
    cfg: &AttributionConfig,
) -> Result<Vec<Counterfactual>, AttributeError> {
    let base = log_likelihood(params, vocab, mol, ctx, false)?;
    let samplers = (0..mol.len())
        .map(|i| {
            let mut s =
                ReplacementSampler::new(params, vocab, mol, i, ReplacementSource::NullContext)?;
            if sample_under_ctx {
                let mut prefix = vocab.encode_prefix(ctx)?.ids;
                prefix.extend_from_slice(&s.prefix[prefix.len()..]);
                s.prefix = prefix;
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>, AttributeError>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    let max_attempts = n_candidates * cfg.attempt_factor;
    let mut attempts = 0;
    while out.len() < n_candidates && attempts < max_attempts {
        let index = attempts % mol.len();
        attempts += 1;
        let Some(f) = samplers[index].draw(&mut rng, &cfg.sampler)? else {
            continue;
        };
        let x = substitute_fragment(mol, index, &f)?;
        let lp = log_likelihood(params, vocab, &x, ctx, false)?;
        out.push(Counterfactual {
            similarity: token_similarity(mol, &x),
            mol: x,
            index,
            delta_logp: lp - base,
        });
    }
    Ok(out)
}

pub fn counterfactual_search(
    params: &ModelParams,
    vocab: &Vocabulary,
    mol: &SafeMolecule,
    ctx: &ContextTriplet,
    delta: f64,
    n_candidates: usize,
    sample_under_ctx: bool,
    cfg: &AttributionConfig,
) -> Result<Vec<Counterfactual>, AttributeError> {
    if !(delta >= 0.0) {
        return Err(AttributeError::InvalidConfig(format!(
            "delta {delta} must be >= 0"
        )));
    }
    let pool =
        counterfactual_candidates(params, vocab, mol, ctx, n_candidates, sample_under_ctx, cfg)?;
    rank_counterfactuals(mol, pool, delta)
}

/// `(Δ - mean) / std` over one sample set, for plotting only.
pub fn standardized_deltas(samples: &[ReplacementSample]) -> Vec<f64> {
    let d: Vec<f64> = samples.iter().map(|s| s.delta_logp).collect();
    if d.is_empty() {
        return d;
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
    d.iter()
        .map(|x| if sd > 0.0 { (x - mean) / sd } else { 0.0 })
        .collect()
}
