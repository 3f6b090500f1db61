//! Minimal reverse-mode layer graph over `f64` tensors and the segmentation
//! architectures built on it.

mod builder;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
mod ops;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{LayerGraph, Mode, Node, NodeId, Op, OpKind, Tape};
pub use model::{build_model, count_parameters, Arch, Model, ModelConfig, Norm};
pub use optim::{Adam, AdamConfig};
pub use params::{Grads, Param, ParamStore};
pub use tensor::Tensor;
