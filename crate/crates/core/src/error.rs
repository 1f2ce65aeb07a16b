use thiserror::Error;

#[derive(Debug, Error)]
pub enum GamError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// Malformed or inconsistent input data (bad dates, gaps, negative counts).
    #[error("data error: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A linear system could not be solved; carries a condition estimate.
    #[error("singular system: {reason} (condition estimate {condition:.3e})")]
    Singular { reason: String, condition: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("did not converge: {0}")]
    NotConverged(String),
}

pub type Result<T> = std::result::Result<T, GamError>;

impl GamError {
    pub(crate) fn data(msg: impl Into<String>) -> Self {
        GamError::Data(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        GamError::InvalidArgument(msg.into())
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        GamError::DimensionMismatch(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        GamError::Numerical(msg.into())
    }
}
