use std::path::{Path, PathBuf};

use fraglm::tokenizer::train_bpe;
use fraglm::train::{run_stage, Stage, StageRun};
use serde_json::{json, Value};

use crate::config::{require_file, RunConfig};
use crate::error::CliError;
use crate::manifest::{ingest, manifest_path, read_dataset};

use super::load_vocab;

pub fn ingest_cmd(data: &Path) -> Result<Value, CliError> {
    let m = ingest(data)?;
    for b in &m.bad_lines {
        eprintln!("warning: {}: line {}: {}", data.display(), b.line, b.msg);
    }
    Ok(json!({ "manifest_path": manifest_path(data), "manifest": m }))
}

pub fn vocab_cmd(
    cfg: &RunConfig,
    data: &[PathBuf],
    size: usize,
    out: Option<&Path>,
) -> Result<Value, CliError> {
    let data: Vec<PathBuf> = if data.is_empty() {
        [
            &cfg.paths.pretrain_data,
            &cfg.paths.finetune_data,
            &cfg.paths.dpo_data,
        ]
        .into_iter()
        .flatten()
        .cloned()
        .collect()
    } else {
        data.to_vec()
    };
    if data.is_empty() {
        return Err(CliError::Config("no datasets given or configured".into()));
    }
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.vocab.clone())
        .ok_or_else(|| CliError::Config("no vocabulary output path".into()))?;
    let mut molecules = Vec::new();
    let mut contexts = Vec::new();
    let mut manifests = Vec::new();
    for path in &data {
        let ds = read_dataset(&require_file(Some(path), "dataset")?)?;
        molecules.extend(ds.molecules());
        contexts.extend(ds.contexts());
        manifests.push(ds.manifest);
    }
    let vocab = train_bpe(&molecules, size)?.with_contexts(&contexts)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir.display().to_string()))?;
    }
    vocab.save(&out)?;
    Ok(json!({
        "vocab_path": out,
        "size": vocab.len(),
        "structural": vocab.structural_len(),
        "contexts": vocab.context_ids().len(),
        "hash": vocab.hash(),
        "datasets": manifests,
    }))
}

pub fn train_cmd(
    cfg: &RunConfig,
    stage: Stage,
    ckpt: Option<&Path>,
    out: Option<&Path>,
    data: Option<&Path>,
    until: Option<usize>,
) -> Result<Value, CliError> {
    let vocab = load_vocab(cfg)?;
    let data = require_file(
        data.or(cfg.stage_data(stage)),
        &format!("{} data", stage.name()),
    )?;
    if let Some(c) = ckpt {
        require_file(Some(c), "input checkpoint")?;
    } else if stage == Stage::Dpo {
        return Err(CliError::Config(
            "dpo needs --ckpt as the reference model".into(),
        ));
    }
    let out = out.map_or_else(
        || cfg.checkpoints_dir().join(format!("{}.ckpt", stage.name())),
        Path::to_path_buf,
    );
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir.display().to_string()))?;
    }
    let model = cfg.model.resolve(vocab.len())?;
    let report = run_stage(&StageRun {
        stage,
        data: &data,
        vocab: &vocab,
        cfg: cfg.stage(stage).clone(),
        model: model.clone(),
        init_seed: cfg.seed,
        ckpt_in: ckpt,
        ckpt_out: &out,
        until,
    })?;
    let sha = read_dataset(&data).map(|d| d.manifest.sha256).ok();
    Ok(json!({
        "stage": report,
        "checkpoint": out,
        "data": data,
        "data_sha256": sha,
        "vocab_hash": vocab.hash(),
        "model": model,
        "stage_config": cfg.stage(stage),
    }))
}

fn sample_line(
    mol: &fraglm::safe::SafeMolecule,
    ctx: &fraglm::tokenizer::ContextTriplet,
    extra: Value,
) -> String {
    let [fam, tgt, moa] = ctx.slots();
    let mut v = json!({ "safe": mol.serialize(), "fam": fam, "tgt": tgt, "moa": moa });
    if let (Value::Object(m), Value::Object(e)) = (&mut v, extra) {
        m.extend(e);
    }
    v.to_string() + "\n"
}

/// Writes the synthetic corpora and a config that points at them.
pub fn synth_cmd(out: &Path, n_finetune: usize, seed: u64) -> Result<Value, CliError> {
    use fraglm::synth;
    use fraglm::tokenizer::ContextTriplet;
    let all: Vec<_> = [synth::Class::N, synth::Class::O]
        .iter()
        .flat_map(|&c| synth::all_molecules(c))
        .collect();
    let total = all.len();
    if n_finetune >= total {
        return Err(CliError::Config(format!(
            "finetune size must be below {total}"
        )));
    }
    let (train, held) = synth::conditioning_split(n_finetune, total - n_finetune, seed);
    let null = ContextTriplet::null();
    let files: Vec<(&str, String)> = vec![
        ("pretrain.jsonl", all.iter().map(|m| sample_line(m, &null, json!({}))).collect()),
        ("finetune.jsonl", train.iter().map(|s| sample_line(&s.mol, &s.ctx, json!({}))).collect()),
        (
            "heldout.jsonl",
            held.iter()
                .enumerate()
                .map(|(i, s)| {
                    let active = s.ctx.tgt.as_deref() == Some("A") && synth::is_active(&s.mol);
                    sample_line(&s.mol, &s.ctx, json!({ "id": i, "active": active }))
                })
                .collect(),
        ),
        (
            "dpo.jsonl",
            synth::preference_pairs(20, seed)
                .iter()
                .map(|p| {
                    let [fam, tgt, moa] = p.ctx.slots();
                    json!({ "fam": fam, "tgt": tgt, "moa": moa, "pos": p.preferred.serialize(), "neg": p.rejected.serialize() })
                        .to_string()
                        + "\n"
                })
                .collect(),
        ),
        (
            "cliff.jsonl",
            synth::heldout_cliff_pairs(40, seed)
                .iter()
                .map(|p| {
                    json!({ "a": p.a.serialize(), "b": p.b.serialize(), "fam": synth::FAMILY, "tgt": "A",
                            "moa": synth::MOA, "cliff": p.cliff })
                    .to_string()
                        + "\n"
                })
                .collect(),
        ),
        (
            "universe.txt",
            synth::N_CLASS.iter().chain(synth::O_CLASS).map(|f| format!("{f}\n")).collect(),
        ),
    ];
    std::fs::create_dir_all(out).map_err(CliError::io(out.display().to_string()))?;
    for (name, text) in &files {
        std::fs::write(out.join(name), text).map_err(CliError::io(name.to_string()))?;
    }
    let config = json!({
        "seed": seed,
        "model": "tiny",
        "paths": {
            "vocab": "vocab.json",
            "pretrain_data": "pretrain.jsonl",
            "finetune_data": "finetune.jsonl",
            "dpo_data": "dpo.jsonl",
            "checkpoints": "checkpoints",
            "reports": "reports",
        },
        "pretrain": { "epochs": 20, "lr": 0.003, "batch_size": 16 },
        "finetune": { "epochs": 20, "lr": 0.003, "batch_size": 16, "mask_anneal": [0.9, 0.3] },
        "dpo": { "epochs": 20, "lr": 0.0005, "batch_size": 4, "dpo_beta": 0.1 },
        "scoring": { "population": 64 },
    });
    let cfg_path = out.join("config.json");
    std::fs::write(
        &cfg_path,
        serde_json::to_string_pretty(&config).expect("config serializes") + "\n",
    )
    .map_err(CliError::io(cfg_path.display().to_string()))?;
    Ok(json!({
        "dir": out,
        "files": files.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        "config": cfg_path,
    }))
}
