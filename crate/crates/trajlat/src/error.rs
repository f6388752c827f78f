use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrajError {
    #[error("invalid data: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
