use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not positive definite (pivot {value:e} at row {row})")]
    NotPositiveDefinite { row: usize, value: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("quantization plan does not cover the checkpoint; missing paths: {missing:?}, unknown paths: {unknown:?}")]
    Coverage { missing: Vec<String>, unknown: Vec<String> },

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence {
        step: usize,
        loss: f64,
        last_good: Box<crate::model::ModelCheckpoint>,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing artifact {path}; run `quantlab {producer}` first")]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error("artifact {path} was produced by config {found}, current config is {expected} (pass --force to override)")]
    StaleArtifact {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Short machine-readable tag used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::Parameter(_) => "parameter",
            Error::Numeric(_) => "numeric",
            Error::Contract(_) => "contract",
            Error::Coverage { .. } => "coverage",
            Error::Divergence { .. } => "divergence",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::StaleArtifact { .. } => "stale_artifact",
            Error::Context { source, .. } => source.kind(),
        }
    }
}
