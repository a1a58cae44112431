use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a shape or domain precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    /// Target ground truth was requested through a training-side view.
    #[error("target ground truth is sealed; only the evaluation handle may read it")]
    Sealed,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
