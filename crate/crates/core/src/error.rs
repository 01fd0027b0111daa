use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the augmentation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("zero-norm vector cannot be used with a cosine measure")]
    ZeroNorm,

    #[error("non-finite value in vector")]
    NonFinite,

    /// A metric precondition on sample count was not met; class-wise
    /// aggregation skips classes that raise this.
    #[error("not enough samples: {metric} needs at least {needed}, got {got}")]
    InsufficientSamples {
        metric: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("no class has enough samples to compute {0}")]
    NoComputableClass(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("provider error: {0}")]
    Provider(String),

    #[error("provider protocol violation: {0}")]
    Protocol(String),

    #[error("insufficient candidates: wanted {wanted}, got {got}")]
    InsufficientCandidates { wanted: usize, got: usize },

    #[error("unparseable verdict: {0:?}")]
    Verdict(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse failure class, used by the CLI to choose an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    ProviderOrIo,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } | Error::Provider(_) | Error::Protocol(_) => ErrorClass::ProviderOrIo,
            Error::InsufficientCandidates { .. } | Error::Verdict(_) => ErrorClass::ProviderOrIo,
            Error::Stage { source, .. } => source.class(),
            _ => ErrorClass::Validation,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
