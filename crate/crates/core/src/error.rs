use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed subword sequence: {0}")]
    MalformedSegmentation(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("sequence of length {len} exceeds the configured maximum {max}")]
    TooLong { len: usize, max: usize },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("alignment file line {line}: {reason}")]
    Pharaoh { line: usize, reason: String },

    #[error("side mismatch: network trained on {trained} states, input is {input}")]
    SideMismatch { trained: String, input: String },

    #[error("invalid method/granularity combination: {0}")]
    InvalidCombination(String),

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("item sets differ: {0}")]
    ItemMismatch(String),

    #[error("report invariant violated: {0}")]
    Invariant(String),

    #[error("missing artifact {path}: run `{producer}` first")]
    MissingArtifact { path: PathBuf, producer: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
