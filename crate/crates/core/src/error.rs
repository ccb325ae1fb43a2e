use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    Empty,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("probability {0} outside [0, 1]")]
    Probability(f64),

    #[error("context mismatch: {0}")]
    Context(&'static str),

    #[error("invalid sample count K = {k}: {reason}")]
    SampleCount { k: usize, reason: &'static str },

    #[error("enumeration budget exceeded: {0}")]
    Budget(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("oracle cross-check failed: {0}")]
    CrossCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(what: impl Into<String>) -> Error {
    Error::Shape(what.into())
}
