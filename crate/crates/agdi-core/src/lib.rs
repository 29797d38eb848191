//! Desk-scale laboratory for forging copyright-trigger images against a
//! small differentiable multimodal model, simulating derivative models
//! (fine-tuning, pruning, quantization, merging), and verifying ownership
//! signals through black-box queries.

pub mod data;
pub mod error;
pub mod forge;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Element type used by everything above the math core. All artifact-level
/// computation runs in 64-bit floats.
pub type Real = f64;

/// Concrete tensor alias used throughout the crate.
pub type Tensor = tensor::Tensor<Real>;
pub type Tape = tensor::Tape<Real>;
pub type GradientMap = tensor::GradientMap<Real>;
