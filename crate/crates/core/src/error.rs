use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDimension(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("infeasible construction: {0}")]
    Infeasible(String),

    #[error("degenerate direction: {0}")]
    DegenerateDirection(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("enumeration cap exceeded: {0}")]
    CapExceeded(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("oracle disagreement: {0}")]
    OracleDisagreement(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
