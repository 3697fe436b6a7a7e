use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("reference error: {0}")]
    Reference(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension { what: String, expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("split ratio must lie strictly between 0 and 1, got {0}")]
    Ratio(f64),

    #[error("step {step} outside schedule range [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },

    #[error("batch needs at least 2 pairs for in-batch negatives, got {0}")]
    BatchTooSmall(usize),

    #[error("sequence of length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("token id {0} is not in the vocabulary")]
    UnknownTokenId(usize),

    #[error("memory has no rows")]
    EmptyMemory,

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("corpus needs at least {min} instances, got {got}")]
    CorpusTooSmall { min: usize, got: usize },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Schema(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
