use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("identity mismatch: prompt is for `{prompt}` but character is `{character}`")]
    IdentityMismatch { prompt: String, character: String },

    #[error("unknown character `{0}`")]
    UnknownCharacter(String),

    #[error("unsupported question kind `{0}`")]
    UnsupportedQuestion(String),

    #[error("invalid pack sizes: {0}")]
    InvalidSizes(String),

    #[error("schema violation at `{field}`: {reason}")]
    Schema { field: String, reason: String },

    #[error("invalid configuration at `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),

    #[error("token `{0}` is outside the vocabulary")]
    OutOfVocab(String),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("external scorer: {0}")]
    Scorer(String),

    #[error("failed to parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn schema(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Schema { field: field.into(), reason: reason.into() }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by the caller's configuration or input files rather
    /// than by a failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Schema { .. } | Error::Parse { .. } | Error::InvalidSizes(_))
    }
}
