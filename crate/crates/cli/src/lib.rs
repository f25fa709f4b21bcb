//! Command-line driver: dataset ingestion, configuration, checkpoints and
//! one subcommand per experiment.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fraglm::score::Strategy;
use fraglm::train::Stage;

pub use config::{Overrides, RunConfig};
pub use error::CliError;
pub use manifest::{ingest, DatasetManifest};

#[derive(Parser, Debug)]
#[command(
    name = "fraglm",
    version,
    about = "Context-conditioned fragment language model"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// JSON run configuration
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Where to write the JSON report (default: <reports>/<command>.json)
    #[arg(long, global = true, value_name = "PATH")]
    pub report: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    #[arg(long, global = true)]
    pub temperature: Option<f32>,
    #[arg(long = "top-k", global = true)]
    pub top_k: Option<usize>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse::<Strategy>().map_err(|e| e.to_string())
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse()
}

impl GlobalArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            strategy: self.strategy,
            alpha: self.alpha,
            delta: self.delta,
            temperature: self.temperature,
            top_k: self.top_k,
        }
    }
}

/// Context slots given on the command line; omitted slots are masked.
#[derive(Args, Debug, Clone, Default)]
pub struct ContextArgs {
    #[arg(long)]
    pub fam: Option<String>,
    #[arg(long)]
    pub tgt: Option<String>,
    #[arg(long)]
    pub moa: Option<String>,
    /// Mask all context slots
    #[arg(long)]
    pub masked: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic toy corpora and a config pointing at them
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Molecules in the fine-tuning split; the rest are held out
        #[arg(long, default_value_t = 300)]
        finetune: usize,
    },
    /// Scan a JSON-lines dataset and write its manifest beside it
    Ingest { data: PathBuf },
    /// Train a BPE vocabulary on datasets and register their contexts
    Vocab {
        /// Datasets (default: every configured data path)
        #[arg(long)]
        data: Vec<PathBuf>,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Output path (default: the configured vocab path)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one training stage
    Train {
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        /// Input checkpoint (required for dpo)
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Output checkpoint (default: <checkpoints>/<stage>.ckpt)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Data file (default: the configured one for the stage)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stop after this many epochs, leaving a resumable checkpoint
        #[arg(long)]
        until: Option<usize>,
    },
    /// Sample molecules de novo or from a scaffold prefix
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[command(flatten)]
        ctx: ContextArgs,
        /// SAFE scaffold forced as the leading fragments
        #[arg(long)]
        scaffold: Option<String>,
        /// JSON-lines output
        #[arg(long)]
        out: PathBuf,
    },
    /// Score molecules under their contexts with every normalization strategy
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        /// JSON-lines {id?, safe, fam, tgt, moa, active?}
        #[arg(long)]
        input: PathBuf,
        /// CSV output
        #[arg(long)]
        out: PathBuf,
    },
    /// ROC-AUC, EF@alpha and Top-K% accuracy from a score CSV
    Screen {
        #[arg(long)]
        input: PathBuf,
    },
    /// Rank candidate contexts for each molecule
    Classify {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Dataset whose contexts form the candidate set and prior
        /// (default: the configured finetune data)
        #[arg(long)]
        contexts: Option<PathBuf>,
        #[arg(long)]
        uniform_prior: bool,
    },
    /// Score molecule pairs for activity cliffs
    Cliff {
        #[arg(long)]
        ckpt: PathBuf,
        /// JSON-lines {a, b, fam, tgt, moa, cliff?}
        #[arg(long)]
        input: PathBuf,
        /// Pairs whose scores calibrate delta (default: the input itself)
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Fragment attribution, pairwise interactions and counterfactuals
    Attribute {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        safe: String,
        #[command(flatten)]
        ctx: ContextArgs,
        #[arg(long, value_enum, default_value_t = SourceKind::Null)]
        source: SourceKind,
        /// Replacement model for --source pretrained
        #[arg(long)]
        ref_ckpt: Option<PathBuf>,
        /// One fragment per line, for --source universe
        #[arg(long)]
        universe: Option<PathBuf>,
        /// Replacements per fragment
        #[arg(long)]
        n: Option<usize>,
        /// Also compute every pairwise interaction
        #[arg(long)]
        pairs: bool,
        #[arg(long, value_enum, default_value_t = JointKind::Given)]
        joint_context: JointKind,
        /// Counterfactual candidates to draw (0 disables the search)
        #[arg(long, default_value_t = 0)]
        counterfactuals: usize,
        /// CSV of every replacement draw and its log-likelihood change
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generation throughput over batch sizes
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [128, 256, 512])]
        batch_sizes: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        runs: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SourceKind {
    Null,
    Pretrained,
    Universe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum JointKind {
    Null,
    Given,
}

/// Runs one parsed invocation and returns its report.
pub fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    let mut cfg = RunConfig::load(cli.global.config.as_deref())?;
    cfg.apply(&cli.global.overrides());
    cfg.validate()?;
    let (name, body) = commands::dispatch(&cfg, cli.command)?;
    report::write(&cfg, name, cli.global.report.as_deref(), body)
}
