//! Lenient ingestion of JSON-lines datasets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fraglm::tokenizer::ContextTriplet;
use fraglm::train::{parse_pair_line, parse_sample_line, PreferencePair, TrainSample};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_VERSION: &str = "manifest-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Samples,
    Pairs,
}

/// Distinct values of each context slot with their record counts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inventory {
    pub fam: BTreeMap<String, usize>,
    pub tgt: BTreeMap<String, usize>,
    pub moa: BTreeMap<String, usize>,
}

impl Inventory {
    pub fn add(&mut self, ctx: &ContextTriplet) {
        for (map, slot) in [&mut self.fam, &mut self.tgt, &mut self.moa]
            .into_iter()
            .zip(ctx.slots())
        {
            if let Some(name) = slot {
                *map.entry(name.to_string()).or_insert(0) += 1;
            }
        }
    }

    /// Every distinct name across the three slots.
    pub fn names(&self) -> Vec<String> {
        let mut all: Vec<String> = self
            .fam
            .keys()
            .chain(self.tgt.keys())
            .chain(self.moa.keys())
            .cloned()
            .collect();
        all.sort();
        all.dedup();
        all
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BadLine {
    pub line: usize,
    pub msg: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub path: PathBuf,
    pub kind: RecordKind,
    /// Non-blank lines.
    pub lines: usize,
    pub records: usize,
    pub bad_lines: Vec<BadLine>,
    pub inventory: Inventory,
    /// SHA-256 of the file bytes.
    pub sha256: String,
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<TrainSample>,
    pub pairs: Vec<PreferencePair>,
}

impl Dataset {
    /// Every molecule in the file, pairs contributing both members.
    pub fn molecules(&self) -> Vec<String> {
        let mut out: Vec<String> = self.samples.iter().map(|s| s.mol.serialize()).collect();
        for p in &self.pairs {
            out.push(p.preferred.serialize());
            out.push(p.rejected.serialize());
        }
        out
    }

    pub fn contexts(&self) -> Vec<ContextTriplet> {
        self.samples
            .iter()
            .map(|s| s.ctx.clone())
            .chain(self.pairs.iter().map(|p| p.ctx.clone()))
            .collect()
    }
}

fn is_pair_line(line: &str) -> bool {
    serde_json::from_str::<serde_json::Value>(line)
        .is_ok_and(|v| v.get("pos").is_some() || v.get("neg").is_some())
}

/// Parses every line, collecting malformed ones instead of stopping. The kind
/// follows the first well-formed JSON object.
pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let bytes = std::fs::read(path).map_err(CliError::io(path.display().to_string()))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|e| CliError::Data(format!("{}: not UTF-8: {e}", path.display())))?;
    let mut kind = None;
    let mut lines = 0;
    let mut bad_lines = Vec::new();
    let mut samples = Vec::new();
    let mut pairs = Vec::new();
    let mut inventory = Inventory::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        let k = *kind.get_or_insert_with(|| {
            if is_pair_line(line) {
                RecordKind::Pairs
            } else {
                RecordKind::Samples
            }
        });
        let parsed = match k {
            RecordKind::Samples => parse_sample_line(line).map(|s| {
                inventory.add(&s.ctx);
                samples.push(s);
            }),
            RecordKind::Pairs => parse_pair_line(line).map(|p| {
                inventory.add(&p.ctx);
                pairs.push(p);
            }),
        };
        if let Err(msg) = parsed {
            bad_lines.push(BadLine { line: i + 1, msg });
        }
    }
    let records = samples.len() + pairs.len();
    if records == 0 {
        return Err(CliError::EmptyCorpus(path.display().to_string()));
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.into(),
        path: path.to_path_buf(),
        kind: kind.unwrap_or(RecordKind::Samples),
        lines,
        records,
        bad_lines,
        inventory,
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    Ok(Dataset {
        manifest,
        samples,
        pairs,
    })
}

/// `data.jsonl` gets `data.jsonl.manifest.json`.
pub fn manifest_path(data: &Path) -> PathBuf {
    let mut name = data.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    data.with_file_name(name)
}

/// Reads `path` and writes its manifest beside it.
pub fn ingest(path: &Path) -> Result<DatasetManifest, CliError> {
    let ds = read_dataset(path)?;
    let out = manifest_path(path);
    let json = serde_json::to_string_pretty(&ds.manifest).expect("manifest serializes");
    std::fs::write(&out, json + "\n").map_err(CliError::io(out.display().to_string()))?;
    Ok(ds.manifest)
}
