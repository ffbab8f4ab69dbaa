use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("second-order gradient is not supported through `{op}`")]
    UnsupportedSecondOrder { op: &'static str },

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite {term} at step {step}")]
    NonFinite { term: String, step: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
