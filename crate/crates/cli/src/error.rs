//! Exit-code classification of pipeline failures.

use std::fmt::Display;

use cbag::condition_vocab::ConditionError;
use cbag::corpus::CorpusError;
use cbag::generator::GenerateError;
use cbag::metrics::MetricsError;
use cbag::model::ModelError;
use cbag::tokenizer::TokenizerError;
use cbag::trainer::TrainError;

pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const NUMERICAL: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn usage(msg: impl Display) -> Self {
        Self {
            code: USAGE,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn data(msg: impl Display) -> Self {
        Self {
            code: DATA,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    fn coded(code: u8, e: impl std::error::Error + Send + Sync + 'static) -> Self {
        Self {
            code,
            error: e.into(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::coded(DATA, e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::coded(DATA, e)
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        Self::coded(DATA, e)
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        let code = match e {
            TokenizerError::Temperature(_) => USAGE,
            _ => DATA,
        };
        Self::coded(code, e)
    }
}

impl From<ConditionError> for CliError {
    fn from(e: ConditionError) -> Self {
        let code = match e {
            ConditionError::MinCount => USAGE,
            _ => DATA,
        };
        Self::coded(code, e)
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let code = match e {
            CorpusError::Fraction(_) | CorpusError::WindowLength(_) => USAGE,
            _ => DATA,
        };
        Self::coded(code, e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let code = match e {
            ModelError::Config { .. } => USAGE,
            _ => DATA,
        };
        Self::coded(code, e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteLoss { .. } => NUMERICAL,
            TrainError::Config { .. } | TrainError::ConfigMismatch { .. } => USAGE,
            TrainError::Model(ModelError::Config { .. }) => USAGE,
            _ => DATA,
        };
        Self::coded(code, e)
    }
}

impl From<GenerateError> for CliError {
    fn from(e: GenerateError) -> Self {
        let code = match e {
            GenerateError::Temperature(_)
            | GenerateError::TopP(_)
            | GenerateError::TopK
            | GenerateError::MaxTokens
            | GenerateError::EmptyTitle
            | GenerateError::PromptTooLong { .. } => USAGE,
            GenerateError::AllMasked => NUMERICAL,
            _ => DATA,
        };
        Self::coded(code, e)
    }
}

/// Adds a message to an error while keeping its exit code.
pub trait Context<T> {
    fn context(self, msg: impl Display) -> Result<T, CliError>;
}

impl<T, E: Into<CliError>> Context<T> for Result<T, E> {
    fn context(self, msg: impl Display) -> Result<T, CliError> {
        self.map_err(|e| {
            let e = e.into();
            CliError {
                code: e.code,
                error: e.error.context(msg.to_string()),
            }
        })
    }
}
