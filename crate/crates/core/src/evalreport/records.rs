use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{median, relative_improvement, row_rmse, EvalError};
use crate::expansion::{expand_layer, ExpertBuildConfig};
use crate::metrics::{weighted_cluster_average, GaussianReference, MetricsError, PairGeometry};
use crate::numerics::{Matrix, SeededRng};
use crate::pruner::{accumulate_hessian, compress, prune_neuron_subset, PruneSpec};

/// Per-neuron comparison of dense, single-expert and expanded outputs on
/// held-out inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronEvalRecord {
    pub neuron_index: usize,
    pub dense_wd: f64,
    /// NaN when the sampled pairs are degenerate or MD was not requested.
    pub md: f64,
    pub rmse_sparsegpt: f64,
    pub rmse_expansion: f64,
    pub ri: f64,
    /// Expert output WD within each cluster, weighted by cluster size.
    pub weighted_cluster_wd: f64,
    pub weighted_cluster_md: f64,
    pub mean_abs: f64,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordOptions {
    /// Input pairs per MD estimate; 0 skips MD entirely.
    pub pair_budget: usize,
    /// Clusters with fewer held-out samples are left out of the weighted
    /// cluster metrics.
    pub min_cluster_samples: usize,
}

impl Default for RecordOptions {
    fn default() -> Self {
        Self {
            pair_budget: 20_000,
            min_cluster_samples: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerEvaluation {
    pub records: Vec<NeuronEvalRecord>,
    /// Held-out samples routed to each cluster.
    pub holdout_cluster_sizes: Vec<usize>,
}

impl LayerEvaluation {
    pub fn ri(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.ri).collect()
    }

    /// Median RI over neurons with a finite RI.
    pub fn median_ri(&self) -> Option<f64> {
        median(&self.ri())
    }

    /// Fraction of neurons with RI ≥ 1.
    pub fn fraction_improved(&self) -> f64 {
        let n = self.records.len().max(1) as f64;
        self.records.iter().filter(|r| r.ri >= 1.0).count() as f64 / n
    }
}

/// WD of each row, with zero-variance rows scoring 0.
fn row_wd(y: &Matrix) -> Result<Vec<f64>, EvalError> {
    let reference = GaussianReference::new(y.cols())?;
    (0..y.rows())
        .into_par_iter()
        .map(|r| match reference.wd(y.row(r)) {
            Ok(v) => Ok(v),
            Err(MetricsError::Degenerate) => Ok(0.0),
            Err(e) => Err(e.into()),
        })
        .collect()
}

/// MD of each row over shared pair geometry; NaN where undefined.
fn row_md(geometry: Option<&PairGeometry>, y: &Matrix) -> Vec<f64> {
    match geometry {
        Some(g) => (0..y.rows())
            .into_par_iter()
            .map(|r| g.mapping_difficulty(y.row(r)).unwrap_or(f64::NAN))
            .collect(),
        None => vec![f64::NAN; y.rows()],
    }
}

fn geometry(
    x: &Matrix,
    budget: usize,
    rng: &mut SeededRng,
) -> Result<Option<PairGeometry>, EvalError> {
    if budget == 0 {
        return Ok(None);
    }
    match PairGeometry::new(x, budget, rng) {
        Ok(g) => Ok(Some(g)),
        Err(MetricsError::DegeneratePairs | MetricsError::TooFewSamples { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Size-weighted mean of the finite per-cluster values.
fn weighted_finite(values: &[f64], sizes: &[f64]) -> f64 {
    let (v, s): (Vec<f64>, Vec<f64>) = values
        .iter()
        .zip(sizes)
        .filter(|(v, _)| v.is_finite())
        .map(|(v, s)| (*v, *s))
        .unzip();
    weighted_cluster_average(&v, &s).unwrap_or(f64::NAN)
}

/// Builds a single pruned copy and a `c`-expert expansion of `w` from
/// `x_fit`, then compares both against the dense layer on `x_hold`.
pub fn evaluate_layer(
    w: &Matrix,
    x_fit: &Matrix,
    x_hold: &Matrix,
    c: usize,
    build: &ExpertBuildConfig,
    seed: u64,
    opts: &RecordOptions,
) -> Result<LayerEvaluation, EvalError> {
    let h = accumulate_hessian(x_fit, build.damping)?;
    let (single, _) = compress(w, &h, &build.spec)?;
    let layer = expand_layer(w, None, x_fit, c, build, seed)?;

    let y_dense = w.matmul(x_hold)?;
    let y_single = single.matmul(x_hold)?;
    let labels = layer.router.route_all(x_hold).map_err(crate::expansion::ExpansionError::from)?;
    let y_expanded = layer.forward_with_labels(x_hold, &labels)?;
    let rmse_single = row_rmse(&y_dense, &y_single)?;
    let rmse_expanded = row_rmse(&y_dense, &y_expanded)?;
    let dense_wd = row_wd(&y_dense)?;

    let rng = SeededRng::new(seed);
    let dense_geometry = geometry(x_hold, opts.pair_budget, &mut rng.child(0))?;
    let dense_md = row_md(dense_geometry.as_ref(), &y_dense);

    let n = w.rows();
    let mut members = vec![Vec::new(); c];
    for (col, &l) in labels.iter().enumerate() {
        members[l].push(col);
    }
    let mut cluster_wd = Vec::new();
    let mut cluster_md = Vec::new();
    let mut sizes = Vec::new();
    for (j, idx) in members.iter().enumerate() {
        if idx.len() < opts.min_cluster_samples.max(2) {
            continue;
        }
        let xj = x_hold.select_columns(idx);
        let yj = layer.experts[j].matmul(&xj)?;
        cluster_wd.push(row_wd(&yj)?);
        let g = geometry(&xj, opts.pair_budget, &mut rng.child(1 + j as u64))?;
        cluster_md.push(row_md(g.as_ref(), &yj));
        sizes.push(idx.len() as f64);
    }

    let records = (0..n)
        .map(|r| {
            let row = y_dense.row(r);
            let s = row.len() as f64;
            let mean = row.iter().sum::<f64>() / s;
            let variance = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s;
            let per = |m: &[Vec<f64>]| {
                let v: Vec<f64> = m.iter().map(|c| c[r]).collect();
                weighted_finite(&v, &sizes)
            };
            NeuronEvalRecord {
                neuron_index: r,
                dense_wd: dense_wd[r],
                md: dense_md[r],
                rmse_sparsegpt: rmse_single[r],
                rmse_expansion: rmse_expanded[r],
                ri: relative_improvement(rmse_single[r], rmse_expanded[r]),
                weighted_cluster_wd: per(&cluster_wd),
                weighted_cluster_md: per(&cluster_md),
                mean_abs: mean.abs(),
                variance,
            }
        })
        .collect();
    let mut holdout_cluster_sizes = vec![0; c];
    for &l in &labels {
        holdout_cluster_sizes[l] += 1;
    }
    Ok(LayerEvaluation {
        records,
        holdout_cluster_sizes,
    })
}

/// Median held-out WD of `rows` after pruning only those rows at each
/// sparsity in turn.
pub fn normality_curve(
    w: &Matrix,
    x_fit: &Matrix,
    x_hold: &Matrix,
    rows: &[usize],
    sparsities: &[f64],
    damping: f64,
) -> Result<Vec<f64>, EvalError> {
    let h = accumulate_hessian(x_fit, damping)?;
    let sub = w.select_rows(rows);
    sparsities
        .iter()
        .map(|&s| {
            let all: Vec<usize> = (0..sub.rows()).collect();
            let pruned = prune_neuron_subset(&sub, &h, &all, &PruneSpec::unstructured(s))?;
            let wd = row_wd(&pruned.matmul(x_hold)?)?;
            median(&wd).ok_or(EvalError::Empty)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(seed: u64, r: usize, c: usize) -> Matrix {
        let mut rng = SeededRng::new(seed);
        Matrix::from_fn(r, c, |_, _| rng.normal())
    }

    #[test]
    fn one_cluster_gives_unit_improvement_everywhere() {
        let w = data(1, 6, 8);
        let x = data(2, 8, 200);
        let build = ExpertBuildConfig::new(PruneSpec::unstructured(0.75));
        let ev = evaluate_layer(&w, &x.column_range(0..150), &x.column_range(150..200), 1, &build, 3, &RecordOptions::default()).unwrap();
        assert!(ev.records.iter().all(|r| r.ri == 1.0));
        assert_eq!(ev.fraction_improved(), 1.0);
        assert_eq!(ev.holdout_cluster_sizes, vec![50]);
        assert!(ev.records.iter().all(|r| r.md.is_finite() && r.md > 0.0));
    }

    #[test]
    fn orthogonal_clusters_do_not_lose() {
        // two clusters living on disjoint coordinates
        let mut rng = SeededRng::new(5);
        let x = Matrix::from_fn(8, 400, |r, c| {
            let active = if c % 2 == 0 { r < 4 } else { r >= 4 };
            if active { 3.0 + rng.normal() } else { 0.05 * rng.normal() }
        });
        let w = data(6, 5, 8);
        let build = ExpertBuildConfig::new(PruneSpec::unstructured(0.5));
        let ev = evaluate_layer(&w, &x.column_range(0..300), &x.column_range(300..400), 2, &build, 0, &RecordOptions { pair_budget: 0, ..RecordOptions::default() }).unwrap();
        for r in &ev.records {
            assert!(r.ri >= 1.0 - 1e-9, "{r:?}");
            assert!(r.md.is_nan());
        }
    }

    #[test]
    fn normality_curve_has_one_point_per_sparsity() {
        let w = data(7, 4, 6);
        let x = data(8, 6, 120);
        let c = normality_curve(&w, &x, &x, &[0, 2], &[0.5, 0.7], 0.01).unwrap();
        assert_eq!(c.len(), 2);
    }
}
