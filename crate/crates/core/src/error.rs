use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObeError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("bound violated: {0}")]
    BoundViolated(String),

    #[error("non-finite value during {stage}: {detail}")]
    NonFinite { stage: String, detail: String },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("metric failure: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ObeError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ObeError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        ObeError::Shape(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, ObeError>;
