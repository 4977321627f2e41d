//! Modulated activation quantization for iterative diffusion samplers.
//!
//! Dense layers evaluated across the steps of a sampler see inputs that
//! change only slightly from one step to the next. Quantizing that temporal
//! difference instead of the raw activation cuts the quantizer's input range,
//! and carrying the already-realized activation forward compensates each
//! step's quantization error in the following step.
//!
//! Modules, bottom up:
//!
//! - [`tensor`] / [`rng`]: dense `f64` tensors and a counter-based RNG.
//! - [`quant`]: max–min dynamic quantizer and its error bound.
//! - [`modulated`]: direct, modulated and error-compensated layer paths.
//! - [`diffusion`]: noise schedule, DDPM/DDIM steps, MLP denoiser, sampler.
//! - [`train`]: noise-prediction trainer with manual backprop.
//! - [`analysis`]: drift, activation statistics, cache baseline, Bops, CSV.
//! - [`verify`]: randomized property suites for the error bounds.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod diffusion;
pub mod error;
pub mod modulated;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use modulated::{LayerMode, LinearLayer, ModulatedLayerState, StepDiagnostics, Warmup};
pub use quant::{Granularity, Identity, QuantConfig, Quantizer, Rounding};
pub use rng::RngState;
pub use tensor::{matmul, operator_norm, relative_l2, Tensor};
