//! Object-mask-prior instance segmentation on a synthetic benchmark.
//!
//! The crate implements a small two-stage detector in which the box head's
//! class activation map (computed with the classification layer's own
//! weights) is injected into a class-agnostic mask head as a foreground
//! prior, together with the partially supervised training loop, a COCO-style
//! mask-AP evaluator and the analysis tooling used to study the mechanism.
//!
//! Everything numeric is generic over the scalar type through
//! [`scalar::Scalar`]; `f32` is the training dtype and `f64` backs the
//! finite-difference verification. Concrete aliases for both live at the
//! crate root.

pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};

/// `f32` model (training dtype).
pub type Model32 = model::Model<f32>;
/// `f64` model (verification dtype).
pub type Model64 = model::Model<f64>;

/// `f32` training driver (training dtype).
pub type Trainer32 = train::Trainer<f32>;
/// `f64` training driver (verification dtype).
pub type Trainer64 = train::Trainer<f64>;

/// `f32` tensor (training dtype).
pub type Tensor32 = tensor::Tensor<f32>;
/// `f64` tensor (verification dtype).
pub type Tensor64 = tensor::Tensor<f64>;
/// `f32` autodiff tape.
pub type Graph32 = graph::Graph<f32>;
/// `f64` autodiff tape.
pub type Graph64 = graph::Graph<f64>;
