//! Experiment orchestration: configuration, training, prediction,
//! evaluation, inference benchmarking and report tables.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod predict;
pub mod report;
pub mod train;

pub use bench::{bench_inference, BenchReport};
pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, OptimizerConfig, PreprocessConfig};
pub use error::{Result, RunnerError};
pub use evaluate::evaluate;
pub use predict::{argmax, predict_case, BackgroundPredictor, ModelPredictor, OraclePredictor, Predictor};
pub use train::{train, train_on_cases, EpochLog, TrainOutcome, Trainer};
