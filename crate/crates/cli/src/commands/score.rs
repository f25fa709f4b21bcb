use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use fraglm::score::{
    build_population_cache, cliff_threshold, draw_seed, enrichment_factor, is_cliff,
    rank_descending, roc_auc, topk_accuracy, ContextPrior, PopulationCache, ScoreError, Scorer,
    Strategy,
};
use fraglm::tokenizer::ContextTriplet;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::read_dataset;

use super::{load_model, parse_at, read_jsonl, read_molecules};

/// Contexts observed in the configured fine-tuning data, if any.
fn observed_contexts(
    cfg: &RunConfig,
    path: Option<&Path>,
) -> Result<Vec<ContextTriplet>, CliError> {
    match path.or(cfg.paths.finetune_data.as_deref()) {
        Some(p) if p.is_file() => Ok(read_dataset(p)?.contexts()),
        Some(p) => Err(CliError::Config(format!(
            "context data {} does not exist",
            p.display()
        ))),
        None => Ok(Vec::new()),
    }
}

#[derive(Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub safe: String,
    pub fam: Option<String>,
    pub tgt: Option<String>,
    pub moa: Option<String>,
    pub active: Option<bool>,
    pub raw_logp: f64,
    pub l: Option<f64>,
    pub l_pop: Option<f64>,
    pub l_null: Option<f64>,
    pub l_prior: Option<f64>,
    pub l_pop_prior: Option<f64>,
    pub l_null_prior: Option<f64>,
    /// 1-based position under the selected strategy.
    pub rank: usize,
}

impl ScoreRow {
    pub fn get(&self, s: Strategy) -> Option<f64> {
        match s {
            Strategy::L => self.l,
            Strategy::LPop => self.l_pop,
            Strategy::LNull => self.l_null,
            Strategy::LPrior => self.l_prior,
            Strategy::LPopPrior => self.l_pop_prior,
            Strategy::LNullPrior => self.l_null_prior,
        }
    }

    fn set(&mut self, s: Strategy, v: f64) {
        let slot = match s {
            Strategy::L => &mut self.l,
            Strategy::LPop => &mut self.l_pop,
            Strategy::LNull => &mut self.l_null,
            Strategy::LPrior => &mut self.l_prior,
            Strategy::LPopPrior => &mut self.l_pop_prior,
            Strategy::LNullPrior => &mut self.l_null_prior,
        };
        *slot = Some(v);
    }
}

pub fn score_cmd(
    cfg: &RunConfig,
    ckpt: &Path,
    input: &Path,
    out: &Path,
) -> Result<Value, CliError> {
    let (vocab, params) = load_model(cfg, ckpt)?;
    let records = read_molecules(input)?;
    let contexts: Vec<ContextTriplet> = records
        .iter()
        .map(|(r, _)| r.ctx())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let sc = &cfg.scoring;

    let mut cache = PopulationCache {
        length_normalized: sc.length_normalized,
        entries: Vec::new(),
    };
    let mut skipped = Vec::new();
    if sc.population > 0 {
        for (k, ctx) in contexts.iter().enumerate() {
            let seed = draw_seed(cfg.seed, k as u64);
            match build_population_cache(
                &params,
                &vocab,
                ctx,
                sc.population,
                seed,
                &cfg.sample,
                sc.length_normalized,
            ) {
                Ok(e) => cache.insert(e),
                Err(ScoreError::AllSamplesInvalid(_)) => skipped.push(ctx.to_string()),
                Err(e) => return Err(e.into()),
            }
        }
    }
    let prior = ContextPrior::laplace(&contexts, &observed_contexts(cfg, None)?)?;
    let scorer = Scorer {
        cache: Some(&cache),
        prior: Some(&prior),
        length_normalized: sc.length_normalized,
        ..Scorer::new(&params, &vocab)
    };

    let mut rows = Vec::with_capacity(records.len());
    for (n, (rec, mol)) in records.iter().enumerate() {
        let ctx = rec.ctx();
        let strategies: Vec<Strategy> = Strategy::ALL
            .into_iter()
            .filter(|s| !s.uses_population() || cache.get(&ctx).is_some())
            .collect();
        if !strategies.contains(&sc.strategy) {
            return Err(CliError::Config(format!(
                "strategy {} needs a population mean for {ctx}; raise scoring.population",
                sc.strategy.name()
            )));
        }
        let scored = scorer.score(mol, &ctx, &strategies)?;
        let mut row = ScoreRow {
            id: rec.id_or(n + 1),
            safe: mol.serialize(),
            fam: rec.fam.clone(),
            tgt: rec.tgt.clone(),
            moa: rec.moa.clone(),
            active: rec.active,
            raw_logp: scored.raw_logp,
            l: None,
            l_pop: None,
            l_null: None,
            l_prior: None,
            l_pop_prior: None,
            l_null_prior: None,
            rank: 0,
        };
        for (s, v) in scored.normalized {
            row.set(s, v);
        }
        rows.push(row);
    }
    let selected: Vec<f64> = rows
        .iter()
        .map(|r| r.get(sc.strategy).expect("checked above"))
        .collect();
    for (pos, i) in rank_descending(&selected).into_iter().enumerate() {
        rows[i].rank = pos + 1;
    }

    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir.display().to_string()))?;
    }
    let mut w = csv::Writer::from_path(out)
        .map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(CliError::io(out.display().to_string()))?;

    Ok(json!({
        "out": out,
        "n": rows.len(),
        "strategy": sc.strategy,
        "length_normalized": sc.length_normalized,
        "contexts": contexts.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "population": cache.entries,
        "population_skipped": skipped,
    }))
}

pub fn read_score_csv(path: &Path) -> Result<Vec<ScoreRow>, CliError> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let rows = r
        .deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| CliError::Schema {
                path: path.display().to_string(),
                line: i + 2,
                msg: e.to_string(),
            })
        })
        .collect::<Result<Vec<ScoreRow>, _>>()?;
    if rows.is_empty() {
        return Err(CliError::EmptyCorpus(path.display().to_string()));
    }
    Ok(rows)
}

/// Screening metrics from a score CSV. Rows sharing an id are one molecule
/// scored under several contexts; those groups feed Top-K% accuracy.
pub fn screen_cmd(cfg: &RunConfig, input: &Path) -> Result<Value, CliError> {
    let rows = read_score_csv(input)?;
    let sc = &cfg.scoring;
    let column = |r: &ScoreRow| {
        r.get(sc.strategy)
            .ok_or_else(|| CliError::Data(format!("row {}: no {} score", r.id, sc.strategy.name())))
    };
    let label = |r: &ScoreRow| {
        r.active
            .ok_or_else(|| CliError::Data(format!("row {}: no active label", r.id)))
    };
    let scores = rows.iter().map(column).collect::<Result<Vec<_>, _>>()?;
    let labels = rows.iter().map(label).collect::<Result<Vec<_>, _>>()?;
    let auc = roc_auc(&scores, &labels)?;
    let ef = enrichment_factor(&scores, &labels, sc.alpha)?;

    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for ((r, &s), &l) in rows.iter().zip(&scores).zip(&labels) {
        let g = groups.entry(r.id.as_str()).or_default();
        g.0.push(s);
        g.1.push(l);
    }
    let (pred, truth): (Vec<Vec<f64>>, Vec<Vec<bool>>) =
        groups.into_values().filter(|g| g.0.len() > 1).unzip();
    let topk = if pred.is_empty() {
        None
    } else {
        Some(topk_accuracy(&pred, &truth, sc.topk_percent)?)
    };
    Ok(json!({
        "input": input,
        "strategy": sc.strategy,
        "n": rows.len(),
        "actives": labels.iter().filter(|&&l| l).count(),
        "roc_auc": auc,
        "alpha": sc.alpha,
        "ef": ef,
        "topk_percent": sc.topk_percent,
        "topk_groups": pred.len(),
        "topk": topk,
    }))
}

pub fn classify_cmd(
    cfg: &RunConfig,
    ckpt: &Path,
    input: &Path,
    contexts: Option<&Path>,
    uniform_prior: bool,
) -> Result<Value, CliError> {
    let (vocab, params) = load_model(cfg, ckpt)?;
    let records = read_molecules(input)?;
    let observed = observed_contexts(cfg, contexts)?;
    let full = |c: &ContextTriplet| c.slots().iter().all(Option::is_some);
    let mut candidates: BTreeSet<ContextTriplet> =
        observed.iter().filter(|c| full(c)).cloned().collect();
    if candidates.is_empty() {
        candidates = records.iter().map(|(r, _)| r.ctx()).filter(full).collect();
    }
    let candidates: Vec<ContextTriplet> = candidates.into_iter().collect();
    if candidates.is_empty() {
        return Err(CliError::Data(
            "no fully specified candidate contexts".into(),
        ));
    }
    let prior = ContextPrior::laplace(&candidates, &observed)?;
    let scorer = Scorer {
        prior: (!uniform_prior).then_some(&prior),
        length_normalized: cfg.scoring.length_normalized,
        ..Scorer::new(&params, &vocab)
    };
    let mut out = Vec::with_capacity(records.len());
    let (mut judged, mut correct) = (0, 0);
    for (n, (rec, mol)) in records.iter().enumerate() {
        let ranked = scorer.classify_context(mol, &candidates, &ContextTriplet::null())?;
        let truth = rec.ctx();
        let truth_rank = ranked.iter().position(|s| s.ctx == truth).map(|p| p + 1);
        if truth_rank.is_some() {
            judged += 1;
            correct += usize::from(truth_rank == Some(1));
        }
        out.push(json!({
            "id": rec.id_or(n + 1),
            "safe": mol.serialize(),
            "truth": (!truth.is_null()).then(|| truth.to_string()),
            "predicted": ranked[0].ctx.to_string(),
            "posterior": ranked[0].posterior,
            "truth_rank": truth_rank,
            "ranking": ranked.iter().take(5).map(|s| json!({
                "context": s.ctx.to_string(),
                "logp": s.logp,
                "log_prior": s.log_prior,
                "posterior": s.posterior,
            })).collect::<Vec<_>>(),
        }));
    }
    Ok(json!({
        "input": input,
        "candidates": candidates.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "prior": if uniform_prior { "uniform" } else { "laplace" },
        "judged": judged,
        "accuracy": (judged > 0).then(|| correct as f64 / judged as f64),
        "molecules": out,
    }))
}

#[derive(Deserialize)]
struct PairRecord {
    a: String,
    b: String,
    #[serde(default)]
    fam: Option<String>,
    #[serde(default)]
    tgt: Option<String>,
    #[serde(default)]
    moa: Option<String>,
    #[serde(default)]
    cliff: Option<bool>,
}

fn pair_scores(scorer: &Scorer, path: &Path) -> Result<Vec<(PairRecord, f64)>, CliError> {
    read_jsonl::<PairRecord>(path)?
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let a = parse_at(path, i + 1, &p.a)?;
            let b = parse_at(path, i + 1, &p.b)?;
            let ctx = ContextTriplet::new(p.fam.as_deref(), p.tgt.as_deref(), p.moa.as_deref());
            let s = scorer.cliff_score(&a, &b, &ctx)?;
            Ok((p, s))
        })
        .collect()
}

pub fn cliff_cmd(
    cfg: &RunConfig,
    ckpt: &Path,
    input: &Path,
    calibration: Option<&Path>,
) -> Result<Value, CliError> {
    let (vocab, params) = load_model(cfg, ckpt)?;
    let scorer = Scorer {
        length_normalized: cfg.scoring.length_normalized,
        ..Scorer::new(&params, &vocab)
    };
    let scored = pair_scores(&scorer, input)?;
    let (delta, source) = match (cfg.scoring.delta, calibration) {
        (Some(d), _) => (d, "given".to_string()),
        (None, Some(c)) => {
            let cal: Vec<f64> = pair_scores(&scorer, c)?
                .into_iter()
                .map(|(_, s)| s)
                .collect();
            (cliff_threshold(&cal)?, format!("p95 of {}", c.display()))
        }
        (None, None) => {
            let s: Vec<f64> = scored.iter().map(|(_, s)| *s).collect();
            (cliff_threshold(&s)?, "p95 of input".to_string())
        }
    };
    let scores: Vec<f64> = scored.iter().map(|(_, s)| *s).collect();
    let labels: Option<Vec<bool>> = scored.iter().map(|(p, _)| p.cliff).collect();
    let mean_of = |want: bool| {
        let l = labels.as_ref()?;
        let v: Vec<f64> = scores
            .iter()
            .zip(l)
            .filter(|(_, &c)| c == want)
            .map(|(s, _)| *s)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let auc = labels.as_ref().and_then(|l| roc_auc(&scores, l).ok());
    let accuracy = labels.as_ref().map(|l| {
        let hits = scores
            .iter()
            .zip(l)
            .filter(|(&s, &c)| is_cliff(s, delta) == c)
            .count();
        hits as f64 / l.len() as f64
    });
    Ok(json!({
        "input": input,
        "delta": delta,
        "delta_source": source,
        "n": scores.len(),
        "flagged": scores.iter().filter(|&&s| is_cliff(s, delta)).count(),
        "roc_auc": auc,
        "accuracy": accuracy,
        "mean_score_cliff": mean_of(true),
        "mean_score_non_cliff": mean_of(false),
        "pairs": scored.iter().map(|(p, s)| json!({
            "a": p.a, "b": p.b, "score": s, "predicted": is_cliff(*s, delta), "cliff": p.cliff,
        })).collect::<Vec<_>>(),
    }))
}
