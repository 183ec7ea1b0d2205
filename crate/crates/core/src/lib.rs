//! Desk-scale multimodal imitation learning: a two-stage latent-bottleneck
//! encoder, a flow-matching action expert, and jointly trained progress heads
//! whose detached outputs reweight the imitation loss, exercised end to end on
//! the synthetic ChainWorld manipulation environment.
//!
//! Everything numeric is generic over the [`Scalar`] element type. Training
//! uses `f32`; the finite-difference gradient oracles instantiate the same
//! code at `f64` where the tolerances are meaningful.

pub mod chainworld;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod expert;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod progress;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{CoreError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Element type used for training and evaluation.
pub type Real = f32;

/// Tensor over the training element type.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used by the gradient-check oracles.
pub type Tensor64 = Tensor<f64>;
