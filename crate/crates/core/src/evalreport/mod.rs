//! Reconstruction metrics, per-neuron evaluation of expanded layers,
//! parameter sweeps, targeted ablations and report files.
//!
//! Model quality is measured as output MSE against the dense model on
//! held-out inputs.

mod ablation;
mod records;
mod sweep;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expansion::ExpansionError;
use crate::metrics::MetricsError;
use crate::numerics::{Matrix, NumericsError};
use crate::pruner::PrunerError;

pub use ablation::{
    random_mask_variance_ratio, selection_count, targeted_ablation, AblationConfig, AblationRow,
    AblationSelector, MetricSelector,
};
pub use records::{evaluate_layer, normality_curve, LayerEvaluation, NeuronEvalRecord, RecordOptions};
pub use sweep::{run_sweep, EvalConfig, SweepAxis, SweepReport, SweepRow};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("no samples")]
    Empty,
    #[error("bin count must be ≥ 1")]
    BadBinCount,
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Expansion(#[from] ExpansionError),
    #[error(transparent)]
    Pruner(#[from] PrunerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// `sqrt(mean((dense − sparse)²))`.
pub fn per_neuron_rmse(dense: &[f64], sparse: &[f64]) -> Result<f64, EvalError> {
    if dense.len() != sparse.len() {
        return Err(EvalError::LengthMismatch {
            left: dense.len(),
            right: sparse.len(),
        });
    }
    if dense.is_empty() {
        return Err(EvalError::Empty);
    }
    let ss: f64 = dense.iter().zip(sparse).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / dense.len() as f64).sqrt())
}

/// [`per_neuron_rmse`] for every row of two equally shaped matrices.
pub fn row_rmse(dense: &Matrix, sparse: &Matrix) -> Result<Vec<f64>, EvalError> {
    if dense.shape() != sparse.shape() {
        return Err(EvalError::LengthMismatch {
            left: dense.len(),
            right: sparse.len(),
        });
    }
    dense
        .row_iter()
        .zip(sparse.row_iter())
        .map(|(a, b)| per_neuron_rmse(a, b))
        .collect()
}

/// `rmse_sparsegpt / rmse_expansion`; 1 when both are zero and +∞ when only
/// the expansion is exact.
pub fn relative_improvement(rmse_sparsegpt: f64, rmse_expansion: f64) -> f64 {
    if rmse_expansion > 0.0 {
        rmse_sparsegpt / rmse_expansion
    } else if rmse_sparsegpt > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: usize,
}

/// Equal-width bins over `[min, max]`; the last bin is closed on the right.
/// Constant samples all land in the first bin.
pub fn histogram(samples: &[f64], bin_count: usize) -> Result<Vec<HistBin>, EvalError> {
    if bin_count == 0 {
        return Err(EvalError::BadBinCount);
    }
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(MetricsError::NonFiniteSample(i).into());
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bin_count as f64;
    let mut counts = vec![0usize; bin_count];
    for &v in samples {
        let b = if width > 0.0 {
            (((v - lo) / width) as usize).min(bin_count - 1)
        } else {
            0
        };
        counts[b] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistBin {
            bin_left: lo + width * i as f64,
            bin_right: if i + 1 == bin_count {
                hi
            } else {
                lo + width * (i + 1) as f64
            },
            count,
        })
        .collect())
}

/// Splits columns into a leading fit part and a trailing held-out part
/// holding `holdout_fraction` of the columns.
pub fn split_holdout(x: &Matrix, holdout_fraction: f64) -> Result<(Matrix, Matrix), EvalError> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(EvalError::InvalidConfig(format!(
            "holdout fraction {holdout_fraction} outside (0, 1)"
        )));
    }
    let s = x.cols();
    let fit = ((1.0 - holdout_fraction) * s as f64 + 1e-9).floor() as usize;
    if fit < 2 || s - fit < 2 {
        return Err(EvalError::InvalidConfig(format!(
            "{s} columns leave too few for fit ({fit}) or held-out ({})",
            s - fit
        )));
    }
    Ok((x.column_range(0..fit), x.column_range(fit..s)))
}

/// Serializes `rows` as CSV with a header taken from the field names.
pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| EvalError::Io {
        path: path.as_ref().to_path_buf(),
        source,
    })
}

pub fn write_histogram_csv(path: impl AsRef<Path>, bins: &[HistBin]) -> Result<(), EvalError> {
    write_csv(path, bins)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<(), EvalError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Median of the finite values, `None` when there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}
