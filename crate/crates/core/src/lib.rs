//! Masked sub-model training on a miniature vision transformer.
//!
//! A main forward pass is trained on ground-truth labels while a second
//! pass over the same weights, with masked input tokens, extra dropout, or
//! a higher drop-path rate, is trained to match the main pass's softmax
//! output (treated as a constant). The crate contains everything needed to
//! run and inspect that objective at desk scale: a reverse-mode autodiff
//! engine, the transformer, the masking strategies, the objectives, a
//! deterministic trainer, and training-dynamics instrumentation.

pub mod error;
pub mod rng;
pub mod tensor;
pub mod vit;
pub mod masking;
pub mod data;
pub mod objective;
pub mod trainer;
pub mod analysis;
pub mod checkpoint;

pub use error::{Error, Result};
