use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DtsError>;

#[derive(Debug, Error)]
pub enum DtsError {
    /// Invalid hyperparameters or configuration values.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller broke an operation's preconditions (shapes, ranges).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Input data inconsistent with the declared class count or layout.
    #[error("data error: {0}")]
    Data(String),
    #[error("tensor file format error: {0}")]
    Format(String),
    /// A metric has no defined value for the given masks (e.g. Hausdorff on an empty mask).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl DtsError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DtsError::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::DtsError::Config(format!($($arg)*)) };
}
macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::DtsError::Contract(format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use contract_err;
