use std::io;

use thiserror::Error;

use crate::scorer_bridge::ScorerError;

/// Errors raised while extracting, parsing or applying transformation rules.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("rule `{rule}` is incompatible with form `{form}`: {reason}")]
    Incompatible {
        rule: String,
        form: String,
        reason: String,
    },

    #[error("cannot parse rule `{input}`: {reason}")]
    Parse { input: String, reason: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Rule(#[from] RuleError),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("scorer error{}: {source}", context.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    Scorer {
        context: Option<String>,
        #[source]
        source: ScorerError,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<ScorerError> for Error {
    fn from(source: ScorerError) -> Self {
        Error::Scorer {
            context: None,
            source,
        }
    }
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
