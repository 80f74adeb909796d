//! muplab: a width-scaling laboratory for MLP parametrizations.
//!
//! The crate trains small multilayer perceptrons under different layerwise
//! scaling rules (spectral/µP, standard, neural-tangent, Frobenius-corrected)
//! and measures the spectral quantities that distinguish feature learning
//! from lazy training: spectral norms, stable ranks, and matrix-vector
//! alignment, swept across network width and fit to power laws.
//!
//! Modules:
//! - [`linalg`]: dense vectors/matrices, power-iteration spectral norm,
//!   stable rank, alignment, natural norms, seeded sampling.
//! - [`model`]: MLP forward pass, manual backpropagation, squared-error loss.
//! - [`parametrization`]: layerwise init scales and learning rates per rule.
//! - [`optimizer`]: SGD variants (layerwise, spectrally normalized,
//!   Frobenius-normalized, sign-based) and the training loop.
//! - [`instrumentation`]: the measured diagnostics and their stable ids.
//! - [`data`]: synthetic Gaussian batches, one-hot batches, CIFAR-10 binary
//!   loader, framed batch cache.
//! - [`paths`]: pathwise decomposition of deep linear networks.
//! - [`sweep`]: width-sweep orchestration, log-log slope fits, aggregation.
//! - [`cli`]: the `muplab` command-line interface.

pub mod cli;
pub mod data;
pub mod instrumentation;
pub mod linalg;
pub mod model;
pub mod optimizer;
pub mod parametrization;
pub mod paths;
pub mod sweep;
