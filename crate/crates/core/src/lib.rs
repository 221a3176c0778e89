pub mod tensor_core;
pub mod synth;
pub mod text;
pub mod evaluation;
pub mod retrieval;
pub mod nn;
pub mod checker;
pub mod error;
pub mod facts;
pub mod generator;
pub mod reader;
pub mod inference;
pub mod model;
pub mod training;

pub use error::ModelError;
pub use model::{LossWeights, ModelConfig};
pub use training::TrainConfig;

pub type Pesg64 = model::Pesg<f64>;
pub type Pesg32 = model::Pesg<f32>;
pub type Trainer64 = training::Trainer<f64>;
pub type Trainer32 = training::Trainer<f32>;
pub type Tensor64 = tensor_core::Tensor<f64>;
pub type Tensor32 = tensor_core::Tensor<f32>;
