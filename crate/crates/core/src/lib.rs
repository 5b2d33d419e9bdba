//! Feature-mimicking distillation for compact road segmentation networks.
//!
//! A frozen teacher's feature extractor supervises a group-convolution
//! student's extractor (optionally on target images mixed with a proximity
//! domain), after which the student head is trained with the extractor
//! frozen and the whole network is fine-tuned. Everything numeric is
//! generic over [`scalar::Scalar`] (`f32` or `f64`).

pub mod data;
pub mod distill;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Network32 = model::NetworkPartition<f32>;
pub type Network64 = model::NetworkPartition<f64>;
pub type Checkpoint32 = model::Checkpoint<f32>;
pub type Checkpoint64 = model::Checkpoint<f64>;
