use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside schedule domain [0, {horizon}]")]
    Domain { t: f64, horizon: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error("unsupported operator: {0}")]
    Unsupported(String),

    #[error("non-finite state at step {step} ({context})")]
    NonFinite { step: usize, context: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
