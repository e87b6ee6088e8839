use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RsbError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("size guard exceeded: {0}")]
    SizeGuard(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-monotone cdf: {0}")]
    NonMonotone(String),

    #[error("unbounded functional: |value| = {0} exceeds the magnitude guard")]
    Unbounded(f64),

    #[error("graph sampling failed: {0}")]
    GraphSampling(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, RsbError>;

impl From<serde_json::Error> for RsbError {
    fn from(e: serde_json::Error) -> Self {
        RsbError::Parse(e.to_string())
    }
}

impl From<std::io::Error> for RsbError {
    fn from(e: std::io::Error) -> Self {
        RsbError::Io(e.to_string())
    }
}
