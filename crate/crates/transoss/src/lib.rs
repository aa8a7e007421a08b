//! Cross-modal optical/SAR ship re-identification at desk scale.
//!
//! The crate bundles a small reverse-mode tensor engine, a transformer
//! encoder with per-modality patch tokenizers and auxiliary embeddings,
//! the contrastive / ID / triplet training objectives, a deterministic
//! synthetic paired-modality dataset generator, a two-stage trainer, and
//! a full CMC/mAP retrieval evaluator. Everything is seed-deterministic
//! in single-threaded mode.

pub mod dataio;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod runconfig;
pub mod stream;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default-precision tensor (all training and evaluation use `f64`).
pub type Tensor = tensor::Tensor<f64>;
/// Default-precision tape.
pub type Graph = graph::Graph<f64>;
/// Single-precision variants for callers that want them.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph32 = graph::Graph<f32>;
