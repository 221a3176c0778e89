//! Reverse-mode autodiff over 2-D tensors, parameters, Adagrad and
//! checkpoints.

pub mod checkpoint;
pub mod dropout;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use dropout::dropout_mask;
pub use error::TensorError;
pub use graph::{Graph, Var};
pub use optim::Adagrad;
pub use params::{Gradients, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[cfg(test)]
mod op_tests;
