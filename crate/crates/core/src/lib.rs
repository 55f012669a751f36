//! Single-machine language-model benchmarking stack: a reverse-mode tensor
//! engine, a WordPiece-style tokenizer, transformer encoders with absolute or
//! disentangled (relative-position) attention, masked-token and
//! replaced-token-detection pretraining objectives, AdamW training with
//! checkpointing, and GLUE-style fine-tuning with its evaluation metrics.
//!
//! All numerical code is generic over the scalar type (see [`Scalar`]):
//! training runs in `f32`, while gradient verification uses the same code
//! paths in `f64`.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod glue;
pub mod graph;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod verify;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;

/// Model-precision tensor (training, checkpoints).
pub type Tensor32 = tensor::Tensor<f32>;
/// Verification-precision tensor (finite-difference gradient checks).
pub type Tensor64 = tensor::Tensor<f64>;
/// Model-precision differentiation graph.
pub type Graph32 = graph::Graph<f32>;
/// Verification-precision differentiation graph.
pub type Graph64 = graph::Graph<f64>;
