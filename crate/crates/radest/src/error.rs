use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or arguments (bad shapes, ranges, empty inputs).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Shape mismatch between operands.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A quantity that must stay finite became NaN or infinite.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// A factor or component collapsed to zero mass.
    #[error("degenerate factor: {0}")]
    Degenerate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
