use thiserror::Error;

#[derive(Debug, Error)]
pub enum DpoeError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("injection error: {0}")]
    Injection(String),
    #[error("unrecognized checkpoint format")]
    UnrecognizedCheckpoint,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {snapshot}")]
    NonFinite {
        epoch: usize,
        step: usize,
        snapshot: String,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("report error: {0}")]
    Report(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = DpoeError> = std::result::Result<T, E>;
