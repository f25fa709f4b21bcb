use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::safe::{parse_safe, SafeError, SafeMolecule};
use crate::tokenizer::{TokenSequence, TokenizerError, Vocabulary, EOS_ID};

use super::{Decoder, ModelError, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    /// 0 selects greedy decoding.
    pub temperature: f32,
    /// Keep only the `k` most likely tokens; `None` keeps all.
    pub top_k: Option<usize>,
    pub max_new: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
            max_new: 128,
        }
    }
}

impl SampleConfig {
    pub fn greedy(max_new: usize) -> Self {
        Self {
            temperature: 0.0,
            top_k: Some(1),
            max_new,
        }
    }

    pub fn validate(&self) -> Result<(), SampleError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(SampleError::InvalidConfig(format!(
                "temperature {} must be finite and >= 0",
                self.temperature
            )));
        }
        if self.top_k == Some(0) {
            return Err(SampleError::InvalidConfig("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid sampling config: {0}")]
    InvalidConfig(String),
    #[error("generated text {text:?} does not parse: {source}")]
    ParseFailed { text: String, source: SafeError },
    #[error("generation reached the length limit without <eos>: {text:?}")]
    LengthExceeded { text: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// Tokens produced after a prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    pub ids: Vec<usize>,
    /// The stop token that ended generation, if any (not included in `ids`).
    pub stop: Option<usize>,
}

fn pick(
    logits: &[f32],
    allowed: &dyn Fn(usize) -> bool,
    cfg: &SampleConfig,
    rng: &mut ChaCha8Rng,
) -> Option<usize> {
    let mut cand: Vec<(usize, f32)> = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| allowed(i))
        .map(|(i, &l)| (i, l))
        .collect();
    if cand.is_empty() {
        return None;
    }
    // stable: equal logits keep ascending id order
    cand.sort_by(|a, b| b.1.total_cmp(&a.1));
    if cfg.temperature == 0.0 || cfg.top_k == Some(1) {
        return Some(cand[0].0);
    }
    if let Some(k) = cfg.top_k {
        cand.truncate(k);
    }
    let t = cfg.temperature as f64;
    let max = cand[0].1 as f64;
    let weights: Vec<f64> = cand
        .iter()
        .map(|&(_, l)| ((l as f64 - max) / t).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&(i, _), w) in cand.iter().zip(&weights) {
        if u < *w {
            return Some(i);
        }
        u -= w;
    }
    Some(cand[cand.len() - 1].0)
}

/// Autoregressive continuation of `prefix`. Only ids for which `allowed`
/// holds are eligible; generation stops at any id in `stop` or after
/// `cfg.max_new` tokens (or the model's `max_len`).
pub fn generate_tokens(
    params: &ModelParams,
    prefix: &[usize],
    allowed: &dyn Fn(usize) -> bool,
    stop: &[usize],
    cfg: &SampleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Generation, SampleError> {
    cfg.validate()?;
    params.check_ids(prefix)?;
    let mut dec = Decoder::new(params);
    let mut logits = dec.feed(prefix)?;
    let budget = cfg.max_new.min(params.config.max_len - prefix.len());
    let mut ids = Vec::new();
    for n in 0..budget {
        let Some(id) = pick(&logits, allowed, cfg, rng) else {
            break;
        };
        if stop.contains(&id) {
            return Ok(Generation {
                ids,
                stop: Some(id),
            });
        }
        ids.push(id);
        if n + 1 < budget {
            logits = dec.step(id)?;
        }
    }
    Ok(Generation { ids, stop: None })
}

/// Samples one molecule after a context prefix. With a scaffold, its tokens
/// and a fragment separator are forced as the start of the molecule, so the
/// scaffold survives verbatim as leading fragments.
pub fn sample(
    params: &ModelParams,
    vocab: &Vocabulary,
    ctx_prefix: &TokenSequence,
    scaffold: Option<&SafeMolecule>,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<SafeMolecule, SampleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut body = Vec::new();
    if let Some(s) = scaffold {
        body.extend(vocab.encode_molecule(s)?);
        body.push(vocab.separator_id());
    }
    let prefix: Vec<usize> = ctx_prefix.ids.iter().chain(&body).copied().collect();
    if prefix.len() >= params.config.max_len {
        return Err(SampleError::LengthExceeded {
            text: vocab.decode_molecular(&body)?,
        });
    }
    let allowed = |id: usize| id == EOS_ID || vocab.is_structural(id);
    let generation = generate_tokens(params, &prefix, &allowed, &[EOS_ID], cfg, &mut rng)?;
    body.extend(&generation.ids);
    let text = vocab.decode_molecular(&body)?;
    if generation.stop.is_none() {
        return Err(SampleError::LengthExceeded { text });
    }
    parse_safe(&text).map_err(|source| SampleError::ParseFailed { text, source })
}
