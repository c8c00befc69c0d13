use thiserror::Error;

/// Errors raised across the crate. The variant tells the caller which
/// contract was broken; the CLI maps variants onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("eligibility error: {0}")]
    Eligibility(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! usage_err {
    ($($arg:tt)*) => { $crate::error::Error::Usage(format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use usage_err;
