use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A scalar hyperparameter is outside its legal range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A caller broke a documented precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// Bad user data: out-of-vocabulary ids, empty datasets, malformed files.
    #[error("input error: {0}")]
    Input(String),

    #[error("mask error: {0}")]
    Mask(String),

    /// Restoring a student initialization failed its digest check.
    #[error("rewind error: {0}")]
    Rewind(String),

    #[error("non-finite value produced by `{0}`")]
    NonFinite(String),

    #[error("unreliable gradient check: {0}")]
    UnreliableCheck(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
