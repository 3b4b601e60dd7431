use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contraction error: {0}")]
    Contraction(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("size guard: {what} requires N <= {max}, got N = {n}")]
    SizeGuard { what: &'static str, n: usize, max: usize },

    #[error("invalid truncation policy: {0}")]
    Policy(String),

    #[error("decomposition failed: {0}")]
    Decomposition(String),

    #[error("gradient error: {0}")]
    Gradient(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
