use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Core(#[from] lesionbench_core::Error),
    #[error(transparent)]
    Nn(#[from] lesionbench_nn::NnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Yaml {
        path: PathBuf,
        #[source]
        source: serde_yaml::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("{0}")]
    Empty(String),
}

pub type Result<T> = std::result::Result<T, RunnerError>;

pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> RunnerError {
    let path = path.into();
    move |source| RunnerError::Io { path, source }
}
