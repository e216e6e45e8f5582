use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{median, split_holdout, EvalError};
use crate::expansion::{
    prune_model_sequential, LayerId, LayerPruner, LayerScope, RowSelector, SequentialPruneOptions,
    ToyModel,
};
use crate::metrics::{top_fraction, GaussianReference};
use crate::numerics::{Matrix, SeededRng};
use crate::pruner::{PruneSpec, DEFAULT_DAMPING};

/// Row-ranking rule for targeted ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSelector {
    Wd,
    Mean,
    Variance,
    WeightMagnitude,
    Random,
}

impl AblationSelector {
    pub const ALL: [AblationSelector; 5] = [
        AblationSelector::Wd,
        AblationSelector::Mean,
        AblationSelector::Variance,
        AblationSelector::WeightMagnitude,
        AblationSelector::Random,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationSelector::Wd => "wd",
            AblationSelector::Mean => "mean",
            AblationSelector::Variance => "variance",
            AblationSelector::WeightMagnitude => "weight_magnitude",
            AblationSelector::Random => "random",
        }
    }
}

impl std::str::FromStr for AblationSelector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown selector {s:?}"))
    }
}

/// Rows selected out of `n` for a fraction: `⌈f·n⌉`, and none for 0.
pub fn selection_count(n: usize, fraction: f64) -> usize {
    if fraction <= 0.0 {
        0
    } else {
        ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
    }
}

/// Picks the highest-scoring `fraction` of rows, scoring each row by the
/// chosen statistic of its outputs on the layer's inputs. `Random` draws a
/// uniform subset keyed by `(seed, layer)`.
#[derive(Clone, Debug)]
pub struct MetricSelector {
    pub kind: AblationSelector,
    pub fraction: f64,
    pub seed: u64,
}

impl MetricSelector {
    fn scores(&self, w: &Matrix, x: &Matrix) -> Vec<f64> {
        let stats = |f: &dyn Fn(&[f64]) -> f64| -> Vec<f64> {
            let y = w.matmul(x).expect("selector input matches layer width");
            y.row_iter().map(f).collect()
        };
        match self.kind {
            AblationSelector::Wd => {
                let y = w.matmul(x).expect("selector input matches layer width");
                let reference = GaussianReference::new(y.cols()).ok();
                (0..y.rows())
                    .into_par_iter()
                    .map(|r| {
                        reference
                            .as_ref()
                            .and_then(|g| g.wd(y.row(r)).ok())
                            .unwrap_or(0.0)
                    })
                    .collect()
            }
            AblationSelector::Mean => {
                stats(&|r| (r.iter().sum::<f64>() / r.len() as f64).abs())
            }
            AblationSelector::Variance => stats(&|r| {
                let n = r.len() as f64;
                let m = r.iter().sum::<f64>() / n;
                r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
            }),
            AblationSelector::WeightMagnitude => w
                .row_iter()
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect(),
            AblationSelector::Random => Vec::new(),
        }
    }
}

impl RowSelector for MetricSelector {
    fn select(&self, layer: LayerId, w: &Matrix, x: &Matrix) -> Vec<usize> {
        let n = w.rows();
        let k = selection_count(n, self.fraction);
        if k == 0 {
            return Vec::new();
        }
        if self.kind == AblationSelector::Random {
            let mut rng = SeededRng::new(self.seed).child(layer.ordinal() as u64);
            let mut idx = rng.sample_indices(n, k);
            idx.sort_unstable();
            return idx;
        }
        let scores = self.scores(w, x);
        top_fraction(&scores, k as f64 / n as f64).unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub fraction: f64,
    pub sparsities: Vec<f64>,
    pub scope: LayerScope,
    /// Independent draws of the random selector; the median is reported.
    pub random_draws: usize,
    pub holdout_fraction: f64,
    pub damping: f64,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            fraction: 1.0 / 32.0,
            sparsities: vec![0.5, 0.7, 0.9],
            scope: LayerScope::Up,
            random_draws: 5,
            holdout_fraction: 0.25,
            damping: DEFAULT_DAMPING,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub selector: AblationSelector,
    pub sparsity: f64,
    /// Held-out model output MSE against the dense model (median over
    /// draws for the random selector).
    pub mse: f64,
    pub draws: usize,
    pub error: Option<String>,
}

/// Prunes only the selected rows of every in-scope layer, for each
/// selector and sparsity, and measures the damage on held-out inputs.
/// Failed grid points are reported with an error and NaN MSE.
pub fn targeted_ablation(
    model: &ToyModel,
    calibration: &Matrix,
    selectors: &[AblationSelector],
    cfg: &AblationConfig,
) -> Result<Vec<AblationRow>, EvalError> {
    let (fit, hold) = split_holdout(calibration, cfg.holdout_fraction)?;
    let dense = model.forward(&hold).map_err(crate::expansion::ExpansionError::from)?;
    let points: Vec<(AblationSelector, f64)> = selectors
        .iter()
        .flat_map(|&s| cfg.sparsities.iter().map(move |&sp| (s, sp)))
        .collect();
    let rows = points
        .par_iter()
        .map(|&(selector, sparsity)| {
            let draws = if selector == AblationSelector::Random {
                cfg.random_draws.max(1)
            } else {
                1
            };
            let run = |draw: usize| -> Result<f64, EvalError> {
                let sel = MetricSelector {
                    kind: selector,
                    fraction: cfg.fraction,
                    seed: SeededRng::new(cfg.seed).child(draw as u64).next_u64(),
                };
                let opts = SequentialPruneOptions {
                    spec: PruneSpec::unstructured(sparsity),
                    method: LayerPruner::SparseGpt,
                    scope: cfg.scope,
                    damping: cfg.damping,
                };
                let pruned = prune_model_sequential(model, &fit, &opts, Some(&sel))?;
                let out = pruned.forward(&hold)?;
                Ok(out.mse(&dense)?)
            };
            let result: Result<Vec<f64>, EvalError> = (0..draws).map(run).collect();
            match result {
                Ok(v) => AblationRow {
                    selector,
                    sparsity,
                    mse: median(&v).unwrap_or(f64::NAN),
                    draws,
                    error: None,
                },
                Err(e) => AblationRow {
                    selector,
                    sparsity,
                    mse: f64::NAN,
                    draws,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(rows)
}

/// Mean over rows of `var(masked output) / var(dense output)` when a
/// uniformly random `⌊s·m⌋` weights of each row are zeroed without any
/// compensation.
pub fn random_mask_variance_ratio(
    w: &Matrix,
    x: &Matrix,
    sparsity: f64,
    rng: &mut SeededRng,
) -> Result<f64, EvalError> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(EvalError::InvalidConfig(format!("sparsity {sparsity} outside [0, 1]")));
    }
    let m = w.cols();
    let zeros = ((sparsity * m as f64) + 1e-9).floor() as usize;
    let mut masked = w.clone();
    for r in 0..w.rows() {
        let row = masked.row_mut(r);
        for j in rng.sample_indices(m, zeros) {
            row[j] = 0.0;
        }
    }
    let var = |y: &[f64]| {
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
    };
    let dense = w.matmul(x)?;
    let sparse = masked.matmul(x)?;
    let ratios: Vec<f64> = dense
        .row_iter()
        .zip(sparse.row_iter())
        .filter_map(|(d, s)| {
            let vd = var(d);
            (vd > 0.0).then(|| var(s) / vd)
        })
        .collect();
    if ratios.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}
