//! From-scratch training engine for binary neural networks.
//!
//! The crate implements two complete training schemes for BNNs — the
//! conventional all-`float32` step and a low-cost step that keeps
//! activations binary, weight gradients binary and activation gradients
//! in a power-of-two format — together with the static analysis tooling
//! (memory footprint, per-batch energy, gradient density) needed to
//! characterize the trade-off between them.
//!
//! Modules:
//!
//! - [`tensor`]: dense f32 tensors with storage-dtype tagging and
//!   deterministic store-time rounding.
//! - [`quant`]: bit-packed tensors, power-of-two and block floating-point
//!   codecs, XNOR-popcount and shift-accumulate matrix multiplies.
//! - [`batchnorm`]: the three batch-normalization variants (ℓ2, ℓ1 and the
//!   BNN-specific ℓ1 whose backward reads only binary activations).
//! - [`layers`]: binary dense / convolutional layers, max pooling,
//!   straight-through estimation.
//! - [`optim`]: Adam, SGD with momentum, Bop, gradient attenuation and
//!   learning-rate schedules.
//! - [`engine`]: the step/epoch orchestration for every scheme, plus
//!   checkpointing and evaluation.
//! - [`analysis`]: lifetime-aware memory reports, the energy cost model
//!   and gradient-density diagnostics.

pub mod analysis;
pub mod batchnorm;
pub mod engine;
pub mod error;
pub mod layers;
pub mod model;
pub mod optim;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
