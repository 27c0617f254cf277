//! Attentive-fusion multimodal sentiment classifier trained with unimodal
//! intermediate tasks, plus the metric and paired-statistics machinery used
//! to compare training protocols.
//!
//! The numeric core, model and training loop are generic over [`Scalar`]
//! (`f32`/`f64`). The aliases below fix the scalar to `f64`, which is what
//! the experiment runner and every reported number use.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod rng;
pub mod runner;
pub mod scalar;
pub mod stats;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Result, StiltError};
pub use rng::DeterministicRng;
pub use scalar::Scalar;

pub type Matrix = tensor::Matrix<f64>;
pub type Param = tensor::Param<f64>;
pub type Model = model::Model<f64>;
pub type Batch = model::Batch<f64>;
pub type ForwardTrace = model::ForwardTrace<f64>;
pub type NormState = ops::NormState<f64>;
pub type AdamW = training::optim::AdamW<f64>;
