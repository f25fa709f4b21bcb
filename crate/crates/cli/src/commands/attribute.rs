use std::path::Path;

use fraglm::attribute::{
    attribute_molecule, attribute_pair, counterfactual_search, AttributeError, AttributionConfig,
    FragmentAttribution, JointContext, ReplacementSource,
};
use fraglm::safe::{parse_safe, Fragment};
use serde_json::{json, Value};

use crate::config::{require_file, RunConfig};
use crate::error::CliError;
use crate::report::write_text;
use crate::{ContextArgs, JointKind, SourceKind};

use super::{load_model, load_params};

pub struct AttributeArgs<'a> {
    pub ckpt: &'a Path,
    pub safe: &'a str,
    pub ctx: &'a ContextArgs,
    pub source: SourceKind,
    pub ref_ckpt: Option<&'a Path>,
    pub universe: Option<&'a Path>,
    pub n: Option<usize>,
    pub pairs: bool,
    pub joint_context: JointKind,
    pub counterfactuals: usize,
    pub out: Option<&'a Path>,
}

fn read_universe(path: &Path) -> Result<Vec<Fragment>, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path.display().to_string()))?;
    let frags = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            Fragment::parse(l.trim()).map_err(|e| CliError::Schema {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if frags.is_empty() {
        return Err(CliError::EmptyCorpus(path.display().to_string()));
    }
    Ok(frags)
}

pub fn attribute_cmd(cfg: &RunConfig, a: &AttributeArgs) -> Result<Value, CliError> {
    let (vocab, params) = load_model(cfg, a.ckpt)?;
    let mol = parse_safe(a.safe).map_err(|e| CliError::Data(format!("--safe: {e}")))?;
    let ctx = a.ctx.triplet();
    let acfg = AttributionConfig {
        n: a.n.unwrap_or(cfg.attribution.n),
        ..cfg.attribution
    };
    let reference;
    let universe;
    let source = match a.source {
        SourceKind::Null => ReplacementSource::NullContext,
        SourceKind::Pretrained => {
            let path = a
                .ref_ckpt
                .ok_or_else(|| CliError::Config("--source pretrained needs --ref-ckpt".into()))?;
            reference = load_params(&vocab, path)?;
            ReplacementSource::Pretrained(&reference)
        }
        SourceKind::Universe => {
            let path = require_file(a.universe, "fragment universe")?;
            universe = read_universe(&path)?;
            ReplacementSource::Universe(&universe)
        }
    };
    let frags = attribute_molecule(&params, &vocab, &mol, &ctx, source, &acfg)?;

    let mut pairs = Vec::new();
    if a.pairs {
        let joint = match a.joint_context {
            JointKind::Null => JointContext::Null,
            JointKind::Given => JointContext::Given,
        };
        for i in 0..mol.len() {
            for j in i + 1..mol.len() {
                pairs.push(attribute_pair(
                    &params, &vocab, &mol, &ctx, i, j, source, &acfg, joint,
                )?);
            }
        }
    }

    let counterfactuals = if a.counterfactuals > 0 {
        let delta = cfg.scoring.delta.unwrap_or(0.0);
        match counterfactual_search(
            &params,
            &vocab,
            &mol,
            &ctx,
            delta,
            a.counterfactuals,
            true,
            &acfg,
        ) {
            Ok(found) => json!({ "delta": delta, "found": found.iter().take(20).map(|c| json!({
                "safe": c.mol.serialize(),
                "index": c.index,
                "delta_logp": c.delta_logp,
                "similarity": c.similarity,
            })).collect::<Vec<_>>() }),
            Err(e @ AttributeError::NoFeasibleCandidate { .. }) => {
                json!({ "delta": delta, "error": e.to_string() })
            }
            Err(e) => return Err(e.into()),
        }
    } else {
        Value::Null
    };

    if let Some(out) = a.out {
        write_samples(out, &frags)?;
    }
    let top = frags
        .iter()
        .max_by(|x, y| x.psi.total_cmp(&y.psi))
        .map(|f| f.index);
    Ok(json!({
        "safe": mol.serialize(),
        "context": ctx.to_string(),
        "source": source.name(),
        "config": acfg,
        "top_fragment": top,
        "fragments": frags.iter().map(|f| json!({
            "index": f.index, "fragment": f.text, "psi": f.psi, "stderr": f.stderr,
            "n": f.n, "attempts": f.attempts, "seed": f.seed,
        })).collect::<Vec<_>>(),
        "pairs": pairs,
        "counterfactuals": counterfactuals,
        "samples_csv": a.out,
    }))
}

/// One CSV row per replacement draw: `index,fragment,replacement,delta_logp`.
fn write_samples(out: &Path, frags: &[FragmentAttribution]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Data(format!("{}: {e}", out.display()));
    w.write_record(["index", "fragment", "replacement", "delta_logp"])
        .map_err(io)?;
    for f in frags {
        for r in &f.samples {
            w.write_record([
                f.index.to_string(),
                f.text.clone(),
                r.fragment.clone(),
                r.delta_logp.to_string(),
            ])
            .map_err(io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    write_text(out, &String::from_utf8(bytes).expect("csv of utf-8 fields"))
}
