//! Wasserstein-neuron analysis and Sparse Expansion for FFN-style models.
//!
//! Module map:
//! - [`numerics`]: matrices, seeded RNG, Cholesky/eigen kernels, tensor codec.
//! - [`metrics`]: output distributions, Wasserstein distances, mapping difficulty.
//! - [`pruner`]: Hessian-aware one-shot pruning, baselines, quantization.
//! - [`router`]: PCA + k-means input routing.
//! - [`expansion`]: expert layers, expanded models, the toy FFN stack.
//! - [`synth`]: synthetic calibration data and planted-neuron models.
//! - [`evalreport`]: reconstruction metrics, sweeps, ablations, reports.

pub mod evalreport;
pub mod expansion;
pub mod metrics;
pub mod numerics;
pub mod pruner;
pub mod router;
pub mod synth;
