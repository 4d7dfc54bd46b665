use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("singular matrix (condition number {cond:.3e})")]
    Singular { cond: f64 },

    #[error("action codec: {0}")]
    Codec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("file format: {0}")]
    Format(String),

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
