//! Weld-radiograph defect segmentation with frequency and multi-scale prompt
//! generators injected into an adapter-tuned, frozen-decoder model.
//!
//! The crate is self-contained: a small double-precision tensor library with
//! hand-written backward rules, the DCT and convolutional-attention prompt
//! generators, the toy encoder/decoder with its freeze/adapt protocol,
//! IoU loss and PR-AUC metrics, a synthetic weld-radiograph generator, and
//! the training/ablation harness.

#![allow(clippy::needless_range_loop)]

pub mod dct;
pub mod error;
pub mod exec;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod prompt;
pub mod synth;
pub mod tensor_core;
pub mod train;

pub use error::{Error, Result};
pub use exec::Execution;
pub use tensor_core::Tensor;
