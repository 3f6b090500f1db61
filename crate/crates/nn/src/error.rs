use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("malformed graph: {0}")]
    Graph(String),
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
