use thiserror::Error;

#[derive(Debug, Error)]
pub enum DistlError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = DistlError> = std::result::Result<T, E>;

pub(crate) fn invalid_input(msg: impl Into<String>) -> DistlError {
    DistlError::InvalidInput(msg.into())
}

pub(crate) fn invalid_config(msg: impl Into<String>) -> DistlError {
    DistlError::InvalidConfig(msg.into())
}
