//! Run configuration: one JSON file plus command-line overrides.

use std::path::{Path, PathBuf};

use fraglm::attribute::AttributionConfig;
use fraglm::model::{ModelConfig, SampleConfig};
use fraglm::score::{Strategy, DEFAULT_POPULATION};
use fraglm::train::{Stage, StageConfig};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Architecture given by preset name or explicitly. The vocabulary size
/// always comes from the vocabulary file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Custom {
        n_heads: usize,
        n_layers: usize,
        d_model: usize,
        d_ff: usize,
        max_len: usize,
        #[serde(default = "default_rope_base")]
        rope_base: f32,
    },
}

fn default_rope_base() -> f32 {
    10_000.0
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Preset("tiny".into())
    }
}

impl ModelSpec {
    pub fn resolve(&self, vocab_size: usize) -> Result<ModelConfig, CliError> {
        let cfg = match self {
            ModelSpec::Preset(name) => ModelConfig::preset(name, vocab_size)
                .ok_or_else(|| CliError::Config(format!("unknown model preset {name:?}")))?,
            &ModelSpec::Custom {
                n_heads,
                n_layers,
                d_model,
                d_ff,
                max_len,
                rope_base,
            } => ModelConfig {
                n_heads,
                n_layers,
                d_model,
                d_ff,
                vocab_size,
                max_len,
                rope_base,
            },
        };
        cfg.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub vocab: Option<PathBuf>,
    pub pretrain_data: Option<PathBuf>,
    pub finetune_data: Option<PathBuf>,
    pub dpo_data: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    /// Strategy used for ranking and screening.
    pub strategy: Strategy,
    /// Early-recognition fraction for EF.
    pub alpha: f64,
    pub topk_percent: f64,
    /// Cliff threshold; `None` calibrates it as a 95th percentile.
    pub delta: Option<f64>,
    /// Samples per context for the population mean; 0 disables `l_pop`.
    pub population: usize,
    pub length_normalized: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::L,
            alpha: 0.01,
            topk_percent: 10.0,
            delta: None,
            population: DEFAULT_POPULATION,
            length_normalized: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSpec,
    pub paths: Paths,
    #[serde(deserialize_with = "pretrain_block")]
    pub pretrain: StageConfig,
    #[serde(deserialize_with = "finetune_block")]
    pub finetune: StageConfig,
    #[serde(deserialize_with = "dpo_block")]
    pub dpo: StageConfig,
    pub sample: SampleConfig,
    pub scoring: ScoringConfig,
    pub attribution: AttributionConfig,
}

/// Reads a stage block over that stage's own defaults, so a partial block
/// keeps e.g. the fine-tuning mask schedule and shuffle setting.
fn stage_block<'de, D: Deserializer<'de>>(stage: Stage, d: D) -> Result<StageConfig, D::Error> {
    let given = Map::<String, Value>::deserialize(d)?;
    let Ok(Value::Object(mut merged)) = serde_json::to_value(StageConfig::for_stage(stage)) else {
        unreachable!("stage config serializes to an object");
    };
    for (k, v) in given {
        if !merged.contains_key(&k) {
            return Err(D::Error::custom(format!(
                "unknown field `{k}` in {}",
                stage.name()
            )));
        }
        merged.insert(k, v);
    }
    serde_json::from_value(Value::Object(merged)).map_err(D::Error::custom)
}

fn pretrain_block<'de, D: Deserializer<'de>>(d: D) -> Result<StageConfig, D::Error> {
    stage_block(Stage::Pretrain, d)
}

fn finetune_block<'de, D: Deserializer<'de>>(d: D) -> Result<StageConfig, D::Error> {
    stage_block(Stage::Finetune, d)
}

fn dpo_block<'de, D: Deserializer<'de>>(d: D) -> Result<StageConfig, D::Error> {
    stage_block(Stage::Dpo, d)
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSpec::default(),
            paths: Paths::default(),
            pretrain: StageConfig::for_stage(Stage::Pretrain),
            finetune: StageConfig::for_stage(Stage::Finetune),
            dpo: StageConfig::for_stage(Stage::Dpo),
            sample: SampleConfig::default(),
            scoring: ScoringConfig::default(),
            attribution: AttributionConfig::default(),
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strategy: Option<Strategy>,
    pub alpha: Option<f64>,
    pub delta: Option<f64>,
    pub temperature: Option<f32>,
    pub top_k: Option<usize>,
}

impl RunConfig {
    /// Reads `path`, resolving relative paths against its directory. Without a
    /// file the defaults apply and paths resolve against the working directory.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let p = &mut cfg.paths;
        for slot in [
            &mut p.vocab,
            &mut p.pretrain_data,
            &mut p.finetune_data,
            &mut p.dpo_data,
            &mut p.checkpoints,
            &mut p.reports,
        ] {
            if let Some(rel) = slot.as_mut().filter(|r| r.is_relative()) {
                *rel = base.join(&*rel);
            }
        }
        Ok(cfg)
    }

    /// Applies overrides and propagates the global seed to every stochastic
    /// component.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(s) = o.strategy {
            self.scoring.strategy = s;
        }
        if let Some(a) = o.alpha {
            self.scoring.alpha = a;
        }
        if o.delta.is_some() {
            self.scoring.delta = o.delta;
        }
        if let Some(t) = o.temperature {
            self.sample.temperature = t;
            self.attribution.sampler.temperature = t;
        }
        if let Some(k) = o.top_k {
            self.sample.top_k = Some(k);
            self.attribution.sampler.top_k = Some(k);
        }
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
        self.dpo.seed = self.seed;
        self.attribution.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        for (name, s) in [
            ("pretrain", &self.pretrain),
            ("finetune", &self.finetune),
            ("dpo", &self.dpo),
        ] {
            s.validate()
                .map_err(|e| CliError::Config(format!("{name}: {e}")))?;
        }
        self.sample
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.scoring.alpha > 0.0 && self.scoring.alpha <= 1.0) {
            return bad(format!("alpha {} outside (0, 1]", self.scoring.alpha));
        }
        if !(self.scoring.topk_percent > 0.0 && self.scoring.topk_percent <= 100.0) {
            return bad(format!(
                "topk_percent {} outside (0, 100]",
                self.scoring.topk_percent
            ));
        }
        if matches!(self.scoring.delta, Some(d) if d.is_nan() || d < 0.0) {
            return bad("delta must be >= 0".into());
        }
        Ok(())
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Pretrain => &self.pretrain,
            Stage::Finetune => &self.finetune,
            Stage::Dpo => &self.dpo,
        }
    }

    pub fn stage_data(&self, stage: Stage) -> Option<&Path> {
        match stage {
            Stage::Pretrain => self.paths.pretrain_data.as_deref(),
            Stage::Finetune => self.paths.finetune_data.as_deref(),
            Stage::Dpo => self.paths.dpo_data.as_deref(),
        }
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.paths
            .checkpoints
            .clone()
            .unwrap_or_else(|| PathBuf::from("checkpoints"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.paths
            .reports
            .clone()
            .unwrap_or_else(|| PathBuf::from("reports"))
    }

    /// Hash of the effective configuration, recorded in every report.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// The file at `path` must exist.
pub fn require_file(path: Option<&Path>, what: &str) -> Result<PathBuf, CliError> {
    let path = path.ok_or_else(|| CliError::Config(format!("no {what} path configured")))?;
    if !path.is_file() {
        return Err(CliError::Config(format!(
            "{what} {} does not exist",
            path.display()
        )));
    }
    Ok(path.to_path_buf())
}
