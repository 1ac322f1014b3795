use mnp_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum MnpError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("context memory init: class {class} has {available} samples, need {needed}")]
    MemoryInit {
        class: usize,
        available: usize,
        needed: usize,
    },
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MnpError> = std::result::Result<T, E>;
