//! Desk-scale parameter-efficient fine-tuning laboratory.
//!
//! The crate bundles the numeric machinery needed to study low-rank adapters
//! and weight quantization on a model small enough to train on one CPU core:
//!
//! - [`tensor`]: dense 2-D tensors, a reverse-mode tape over a fixed op set, SGD.
//! - [`quant`]: asymmetric/symmetric affine and NF4 quantization, bit packing,
//!   double quantization of constants, and the `PQT1` byte format.
//! - [`adapters`]: LoRA and AdaLoRA adapters with budget-scheduled pruning.
//! - [`qlora`]: a linear layer over a frozen quantized weight plus a LoRA adapter.
//! - [`model`]: a small encoder-decoder transformer and its training loop.
//! - [`metrics`]: ROUGE-N/L/S, WER, and corpus statistics.
//! - [`harness`]: experiment configs, checkpoints, reports and dataset generation.

pub mod adapters;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod qlora;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
