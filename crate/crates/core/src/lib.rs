//! Multi-scale transformer for sequence classification, desk scale.
//!
//! The crate bundles a small dense-matrix autodiff engine with attention
//! cost accounting, the multi-scale windowed-attention encoder block and
//! its full-attention baseline, complete classifiers, a synthetic data
//! harness, and a deterministic Adam trainer with WA/UA/WF1 metrics.
//!
//! Core math is generic over the element type (`f32` or `f64`); gradient
//! and oracle checks run in double precision, training defaults to single.

// Numeric kernels index several tensors by the same row/column counters;
// explicit indices read better there than zipped iterators.
#![allow(clippy::needless_range_loop)]

pub mod block;
pub mod checkpoint;
pub mod complexity;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod selftest;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tape::{MacCategory, MacCounter, MacScope, NodeId, Tape};
pub use tensor::Tensor;

/// Single-precision tensor, the training default.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used by gradient checks and oracles.
pub type Tensor64 = Tensor<f64>;

/// Single-precision tape.
pub type Tape32 = Tape<f32>;
/// Double-precision tape.
pub type Tape64 = Tape<f64>;
