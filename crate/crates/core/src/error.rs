use thiserror::Error;

#[derive(Debug, Error)]
pub enum DitiError {
    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] diti_tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DitiError>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err($crate::error::DitiError::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
