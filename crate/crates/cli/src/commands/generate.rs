use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use fraglm::model::{generate_tokens, sample, ModelParams, SampleConfig, SampleError};
use fraglm::safe::{contains_constraint, parse_safe, token_similarity, SafeMolecule};
use fraglm::score::draw_seed;
use fraglm::tokenizer::{ContextTriplet, Vocabulary, EOS_ID};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::report::write_text;
use crate::ContextArgs;

use super::load_model;

#[derive(Serialize)]
struct GeneratedLine {
    index: usize,
    seed: u64,
    safe: Option<String>,
    error: Option<String>,
    /// Scaffold preserved; absent without a scaffold.
    constraint: Option<bool>,
}

/// Mean `1 - token_similarity` over all pairs of the first 200 molecules.
fn diversity(mols: &[&SafeMolecule]) -> Option<f64> {
    let m = &mols[..mols.len().min(200)];
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, a) in m.iter().enumerate() {
        for b in &m[i + 1..] {
            total += 1.0 - token_similarity(a, b);
            pairs += 1;
        }
    }
    (pairs > 0).then(|| total / pairs as f64)
}

pub fn generate_cmd(
    cfg: &RunConfig,
    ckpt: &Path,
    n: usize,
    ctx: &ContextArgs,
    scaffold: Option<&str>,
    out: &Path,
) -> Result<Value, CliError> {
    let (vocab, params) = load_model(cfg, ckpt)?;
    let ctx = ctx.triplet();
    let scaffold = scaffold
        .map(parse_safe)
        .transpose()
        .map_err(|e| CliError::Config(format!("scaffold: {e}")))?;
    let prefix = vocab.encode_prefix(&ctx)?;
    let mut lines = Vec::with_capacity(n);
    let mut valid = Vec::new();
    for i in 0..n {
        let seed = draw_seed(cfg.seed, i as u64);
        let (safe, error, constraint) = match sample(
            &params,
            &vocab,
            &prefix,
            scaffold.as_ref(),
            &cfg.sample,
            seed,
        ) {
            Ok(m) => {
                let c = scaffold.as_ref().map(|s| contains_constraint(&m, s));
                let text = m.serialize();
                valid.push(m);
                (Some(text), None, c)
            }
            Err(e @ (SampleError::ParseFailed { .. } | SampleError::LengthExceeded { .. })) => {
                (None, Some(e.to_string()), None)
            }
            Err(e) => return Err(e.into()),
        };
        lines.push(GeneratedLine {
            index: i,
            seed,
            safe,
            error,
            constraint,
        });
    }
    let text: String = lines
        .iter()
        .map(|l| serde_json::to_string(l).expect("line serializes") + "\n")
        .collect();
    write_text(out, &text)?;

    let unique: BTreeSet<String> = valid.iter().map(SafeMolecule::serialize).collect();
    let preserved = lines.iter().filter(|l| l.constraint == Some(true)).count();
    let frac = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(json!({
        "out": out,
        "n": n,
        "context": ctx.to_string(),
        "scaffold": scaffold.as_ref().map(SafeMolecule::serialize),
        "sampler": cfg.sample,
        "valid": valid.len(),
        "validity": frac(valid.len(), n),
        "unique": unique.len(),
        "uniqueness": frac(unique.len(), valid.len()),
        "constraint_preservation": scaffold.as_ref().and_then(|_| frac(preserved, valid.len())),
        "token_diversity": diversity(&valid.iter().collect::<Vec<_>>()),
    }))
}

/// Throughput of one batch size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub batch_size: usize,
    pub runs: usize,
    pub tokens_per_s: f64,
    pub molecules_per_s: f64,
    pub mean_tokens_per_molecule: f64,
    /// `|molecules/s - tokens/s / tokens per molecule| / molecules/s`.
    pub consistency_error: f64,
    pub run_seconds: Vec<f64>,
    pub run_tokens: Vec<usize>,
}

/// Generates `batch` molecules from the null context `runs` times. Every run
/// repeats the same seeds, so the runs measure an identical workload; the
/// stop token counts as a generated token.
pub fn bench_batch(
    params: &ModelParams,
    vocab: &Vocabulary,
    cfg: &SampleConfig,
    batch: usize,
    runs: usize,
    seed: u64,
) -> Result<BenchRow, CliError> {
    let prefix = vocab.encode_prefix(&ContextTriplet::null())?.ids;
    let allowed = |id: usize| id == EOS_ID || vocab.is_structural(id);
    let mut run_seconds = Vec::with_capacity(runs);
    let mut run_tokens = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        let mut tokens = 0;
        for i in 0..batch {
            let mut rng = ChaCha8Rng::seed_from_u64(draw_seed(seed, i as u64));
            let g = generate_tokens(params, &prefix, &allowed, &[EOS_ID], cfg, &mut rng)?;
            tokens += g.ids.len() + usize::from(g.stop.is_some());
        }
        run_seconds.push(start.elapsed().as_secs_f64().max(1e-9));
        run_tokens.push(tokens);
    }
    let r = runs as f64;
    let tokens_per_s = run_tokens
        .iter()
        .zip(&run_seconds)
        .map(|(&t, s)| t as f64 / s)
        .sum::<f64>()
        / r;
    let molecules_per_s = run_seconds.iter().map(|s| batch as f64 / s).sum::<f64>() / r;
    let mean_tokens_per_molecule = run_tokens.iter().sum::<usize>() as f64 / (batch * runs) as f64;
    let consistency_error =
        (molecules_per_s - tokens_per_s / mean_tokens_per_molecule).abs() / molecules_per_s;
    Ok(BenchRow {
        batch_size: batch,
        runs,
        tokens_per_s,
        molecules_per_s,
        mean_tokens_per_molecule,
        consistency_error,
        run_seconds,
        run_tokens,
    })
}

pub fn bench_cmd(
    cfg: &RunConfig,
    ckpt: &Path,
    batch_sizes: &[usize],
    runs: usize,
) -> Result<Value, CliError> {
    if runs == 0 || batch_sizes.is_empty() || batch_sizes.contains(&0) {
        return Err(CliError::Config(
            "bench needs runs >= 1 and positive batch sizes".into(),
        ));
    }
    let (vocab, params) = load_model(cfg, ckpt)?;
    let rows = batch_sizes
        .iter()
        .map(|&b| bench_batch(&params, &vocab, &cfg.sample, b, runs, cfg.seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(json!({
        "model": params.config,
        "parameters": params.count(),
        "sampler": cfg.sample,
        "threads": 1,
        "rows": rows,
        "consistent": rows.iter().all(|r| r.consistency_error <= 0.01),
    }))
}
