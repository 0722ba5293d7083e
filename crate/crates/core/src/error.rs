use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("token id {token} is out of range for vocabulary of size {vocab}")]
    InvalidToken { token: usize, vocab: usize },

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("parameter shape mismatch: expected {expected} values, found {found}")]
    ShapeMismatch { expected: usize, found: usize },

    #[error("KL divergence undefined: q[{index}] = 0 while p[{index}] = {p}")]
    KlUnsupported { index: usize, p: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("reward {reward} outside [-1, 1] for query {query}")]
    RewardOutOfRange { reward: f64, query: usize },

    #[error("missing old log-probabilities for group {0}")]
    MissingOldLogprobs(usize),

    #[error("set algebra violated: {0}")]
    SetAlgebra(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stage `{needed}` must run before `{requested}`: missing {path}")]
    MissingStage {
        requested: String,
        needed: String,
        path: PathBuf,
    },

    #[error("config hash mismatch for {path}: artifact has {found}, config has {expected}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable category used by the CLI for exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidToken { .. }
            | Error::InvalidVocabulary(_)
            | Error::InvalidArgument(_)
            | Error::Empty(_)
            | Error::ShapeMismatch { .. }
            | Error::KlUnsupported { .. }
            | Error::MissingOldLogprobs(_)
            | Error::SetAlgebra(_) => "invalid-input",
            Error::NonFinite(_) | Error::RewardOutOfRange { .. } => "numeric",
            Error::Config(_) => "config",
            Error::MissingStage { .. } => "stage-dependency",
            Error::HashMismatch { .. } => "hash-mismatch",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }
}
