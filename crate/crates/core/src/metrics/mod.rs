//! Entanglement metrics: output distributions, Wasserstein distances,
//! mapping difficulty, neuron selection and PCA component counts.

mod mapping;
mod selection;
mod wasserstein;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Matrix, NumericsError};

pub use mapping::{
    io_pairs, mapping_difficulty, sample_pairs, IoPairs, PairGeometry, DEFAULT_PAIR_BUDGET,
};
pub use selection::{
    count_components, min_components_for_variance, pearson, top_fraction,
    weighted_cluster_average, ComponentCount,
};
pub use wasserstein::{
    midpoint_quantiles, wd_empirical, wd_rows, wd_to_gaussian, GaussianReference,
};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least {needed} samples, found {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("non-finite sample at position {0}")]
    NonFiniteSample(usize),
    #[error("degenerate distribution: zero variance")]
    Degenerate,
    #[error("neuron {0} has a degenerate (zero-variance) output distribution")]
    DegenerateNeuron(usize),
    #[error("degenerate pairs: zero input or output normalizer")]
    DegeneratePairs,
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("weights {weights:?} do not conform with inputs {inputs:?}")]
    ShapeMismatch {
        weights: (usize, usize),
        inputs: (usize, usize),
    },
    #[error("fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("negative cluster size")]
    NegativeWeight,
    #[error("total cluster size is zero")]
    ZeroTotalWeight,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// One neuron's scalar outputs over a calibration set.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronOutputs {
    pub neuron_index: usize,
    pub samples: Vec<f64>,
}

impl NeuronOutputs {
    pub fn new(neuron_index: usize, samples: Vec<f64>) -> Result<Self, MetricsError> {
        if samples.len() < 2 {
            return Err(MetricsError::TooFewSamples {
                needed: 2,
                found: samples.len(),
            });
        }
        if let Some(p) = samples.iter().position(|v| !v.is_finite()) {
            return Err(MetricsError::NonFiniteSample(p));
        }
        Ok(Self {
            neuron_index,
            samples,
        })
    }
}

/// `W·X (+ b)` split into one [`NeuronOutputs`] per row of `W`.
pub fn collect_outputs(
    w: &Matrix,
    x: &Matrix,
    bias: Option<&[f64]>,
) -> Result<Vec<NeuronOutputs>, MetricsError> {
    if w.cols() != x.rows() || bias.is_some_and(|b| b.len() != w.rows()) {
        return Err(MetricsError::ShapeMismatch {
            weights: w.shape(),
            inputs: x.shape(),
        });
    }
    let mut y = w.matmul(x)?;
    if let Some(b) = bias {
        y.add_row_bias(b);
    }
    (0..y.rows())
        .map(|r| NeuronOutputs::new(r, y.row(r).to_vec()))
        .collect()
}

/// Per-neuron Wasserstein distance to the standard normal for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WdReport {
    pub layer: String,
    pub wd: Vec<f64>,
}

impl WdReport {
    /// Scores every row of the layer output `y` (neurons × samples).
    pub fn from_outputs(layer: impl Into<String>, y: &Matrix) -> Result<Self, MetricsError> {
        Ok(Self {
            layer: layer.into(),
            wd: wd_rows(y)?,
        })
    }

    /// Writes `neuron_index,wd`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["neuron_index", "wd"])?;
        for (i, v) in self.wd.iter().enumerate() {
            w.write_record([i.to_string(), v.to_string()])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// The top `⌈fraction·n⌉` neurons by WD, ties to the lower index, in
/// ascending index order.
pub fn select_wasserstein_neurons(
    report: &WdReport,
    fraction: f64,
) -> Result<Vec<usize>, MetricsError> {
    top_fraction(&report.wd, fraction)
}

impl IoPairs {
    /// Writes `cos_sim,l1_dist`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["cos_sim", "l1_dist"])?;
        for (c, d) in &self.pairs {
            w.write_record([c.to_string(), d.to_string()])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}
