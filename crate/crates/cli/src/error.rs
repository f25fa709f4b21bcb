use fraglm::attribute::AttributeError;
use fraglm::checkpoint::CheckpointError;
use fraglm::model::{ModelError, SampleError};
use fraglm::safe::SafeError;
use fraglm::score::ScoreError;
use fraglm::tokenizer::TokenizerError;
use fraglm::train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: line {line}: {msg}")]
    Schema {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{0}: no records")]
    EmptyCorpus(String),
    #[error("vocabulary mismatch: checkpoint has {found}, config vocabulary is {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("model error: {0}")]
    Model(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 config, 3 data, 4 model.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_)
            | CliError::Schema { .. }
            | CliError::EmptyCorpus(_)
            | CliError::Io { .. } => 3,
            CliError::VocabMismatch { .. } | CliError::Model(_) => 4,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::VocabMismatch { expected, found } => {
                CliError::VocabMismatch { expected, found }
            }
            CheckpointError::Io(e) => CliError::Data(format!("checkpoint: {e}")),
            e => CliError::Model(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::EmptyCorpus => CliError::EmptyCorpus("training data".into()),
            TrainError::Schema { line, msg } => CliError::Schema {
                path: "training data".into(),
                line,
                msg,
            },
            TrainError::IdenticalPair { .. } | TrainError::Io(_) => CliError::Data(e.to_string()),
            TrainError::InvalidConfig(_) | TrainError::MissingReference => {
                CliError::Config(e.to_string())
            }
            TrainError::Checkpoint(e) => e.into(),
            e => CliError::Model(e.to_string()),
        }
    }
}

impl From<ScoreError> for CliError {
    fn from(e: ScoreError) -> Self {
        match e {
            ScoreError::InvalidAlpha(_)
            | ScoreError::UnknownStrategy(_)
            | ScoreError::InvalidPrior(_) => CliError::Config(e.to_string()),
            ScoreError::Model(_) | ScoreError::Sample(_) | ScoreError::AllSamplesInvalid(_) => {
                CliError::Model(e.to_string())
            }
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<AttributeError> for CliError {
    fn from(e: AttributeError) -> Self {
        match e {
            AttributeError::InvalidConfig(_) | AttributeError::SameIndex => {
                CliError::Config(e.to_string())
            }
            AttributeError::Safe(_) | AttributeError::Tokenizer(_) => CliError::Data(e.to_string()),
            e => CliError::Model(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Model(e.to_string())
    }
}

impl From<SampleError> for CliError {
    fn from(e: SampleError) -> Self {
        match e {
            SampleError::InvalidConfig(_) => CliError::Config(e.to_string()),
            e => CliError::Model(e.to_string()),
        }
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SafeError> for CliError {
    fn from(e: SafeError) -> Self {
        CliError::Data(e.to_string())
    }
}
