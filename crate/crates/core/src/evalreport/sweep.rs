use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::records::{evaluate_layer, LayerEvaluation, RecordOptions};
use super::{split_holdout, EvalError};
use crate::expansion::{
    count_dense_params, count_params, expand_model, layer_seed, prune_model_sequential,
    ExpansionConfig, LayerId, LayerPruner, LayerScope, SequentialPruneOptions, ToyModel,
    DEFAULT_CLUSTERS,
};
use crate::numerics::Matrix;
use crate::pruner::{PruneSpec, DEFAULT_DAMPING, DEFAULT_QUANT_GROUP};

/// One axis of a sweep and its grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "grid", rename_all = "snake_case")]
pub enum SweepAxis {
    Sparsity(Vec<f64>),
    Clusters(Vec<usize>),
    /// 2:4 sparsity followed by quantization to each bit width.
    Bits(Vec<u8>),
    /// Fraction of top-WD rows kept dense at the configured sparsity.
    KeepDense(Vec<f64>),
}

impl SweepAxis {
    pub fn default_sparsity() -> Self {
        SweepAxis::Sparsity(vec![0.5, 0.6, 0.7, 0.8, 0.9])
    }

    pub fn default_clusters() -> Self {
        SweepAxis::Clusters(vec![1, 2, 4, 8, 16])
    }

    pub fn default_bits() -> Self {
        SweepAxis::Bits(vec![3, 4])
    }

    pub fn default_keep_dense() -> Self {
        SweepAxis::KeepDense(vec![0.0, 0.03, 0.05, 0.07, 0.10])
    }

    /// Default grid for an axis name: `sparsity`, `clusters`, `bits` or
    /// `keep_dense`.
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "sparsity" => Some(Self::default_sparsity()),
            "clusters" => Some(Self::default_clusters()),
            "bits" => Some(Self::default_bits()),
            "keep_dense" => Some(Self::default_keep_dense()),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Sparsity(_) => "sparsity",
            SweepAxis::Clusters(_) => "clusters",
            SweepAxis::Bits(_) => "bits",
            SweepAxis::KeepDense(_) => "keep_dense",
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            SweepAxis::Sparsity(v) | SweepAxis::KeepDense(v) => v.clone(),
            SweepAxis::Clusters(v) => v.iter().map(|&c| c as f64).collect(),
            SweepAxis::Bits(v) => v.iter().map(|&b| f64::from(b)).collect(),
        }
    }
}

/// Settings held fixed while one axis varies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub sparsity: f64,
    pub clusters: usize,
    pub quant_group: usize,
    pub damping: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
    /// Layer whose neurons get per-neuron records.
    pub record_layer: LayerId,
    pub records: RecordOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sparsity: 0.5,
            clusters: DEFAULT_CLUSTERS,
            quant_group: DEFAULT_QUANT_GROUP,
            damping: DEFAULT_DAMPING,
            holdout_fraction: 0.25,
            seed: 0,
            record_layer: LayerId::up(0),
            records: RecordOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    /// Held-out output MSE of the single-copy pruned model (SparseGPT, or
    /// the keep-dense allocation on that axis).
    pub mse_pruned: Option<f64>,
    pub mse_expansion: Option<f64>,
    pub median_ri: Option<f64>,
    pub fraction_ri_ge_1: Option<f64>,
    pub nonzero_weights: Option<usize>,
    pub router_params: Option<usize>,
    pub total_effective: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    /// Per-neuron evaluation of the record layer at each grid point that
    /// builds an expansion.
    pub layers: Vec<Option<LayerEvaluation>>,
}

struct Point {
    row: SweepRow,
    layer: Option<LayerEvaluation>,
}

fn spec_for(axis: &SweepAxis, value: f64, cfg: &EvalConfig) -> PruneSpec {
    match axis {
        SweepAxis::Sparsity(_) => PruneSpec::unstructured(value),
        SweepAxis::Bits(_) => PruneSpec::nm(2, 4).with_bits(Some(value as u8), cfg.quant_group),
        SweepAxis::Clusters(_) | SweepAxis::KeepDense(_) => PruneSpec::unstructured(cfg.sparsity),
    }
}

fn evaluate_point(
    model: &ToyModel,
    fit: &Matrix,
    hold: &Matrix,
    dense: &Matrix,
    axis: &SweepAxis,
    value: f64,
    cfg: &EvalConfig,
) -> Result<Point, EvalError> {
    let spec = spec_for(axis, value, cfg);
    let mut row = SweepRow {
        axis: axis.name().into(),
        value,
        mse_pruned: None,
        mse_expansion: None,
        median_ri: None,
        fraction_ri_ge_1: None,
        nonzero_weights: None,
        router_params: None,
        total_effective: None,
        error: None,
    };
    let mut opts = SequentialPruneOptions {
        spec: spec.clone(),
        method: LayerPruner::SparseGpt,
        scope: LayerScope::All,
        damping: cfg.damping,
    };
    if let SweepAxis::KeepDense(_) = axis {
        opts.method = LayerPruner::KeepDense {
            keep_fraction: value,
        };
        let pruned = prune_model_sequential(model, fit, &opts, None)?;
        row.mse_pruned = Some(pruned.forward(hold)?.mse(dense)?);
        let p = count_dense_params(&pruned);
        row.nonzero_weights = Some(p.nonzero_weights);
        row.router_params = Some(0);
        row.total_effective = Some(p.total_effective);
        return Ok(Point { row, layer: None });
    }
    let clusters = match axis {
        SweepAxis::Clusters(_) => value as usize,
        _ => cfg.clusters,
    };
    let pruned = prune_model_sequential(model, fit, &opts, None)?;
    row.mse_pruned = Some(pruned.forward(hold)?.mse(dense)?);
    let mut ecfg = ExpansionConfig::new(spec, clusters, cfg.seed);
    ecfg.build.damping = cfg.damping;
    let expanded = expand_model(model, fit, &ecfg)?;
    row.mse_expansion = Some(expanded.forward(hold)?.mse(dense)?);
    let p = count_params(&expanded);
    row.nonzero_weights = Some(p.nonzero_weights);
    row.router_params = Some(p.router_params);
    row.total_effective = Some(p.total_effective);

    let id = cfg.record_layer;
    if id.block >= model.blocks.len() {
        return Err(EvalError::InvalidConfig(format!("record layer {id} not in model")));
    }
    let inputs = model.layer_inputs(fit)?;
    let hold_inputs = model.layer_inputs(hold)?;
    let x_fit = &inputs[id.ordinal()].1;
    let x_hold = &hold_inputs[id.ordinal()].1;
    let layer = evaluate_layer(
        &model.layer(id).weight,
        x_fit,
        x_hold,
        clusters,
        &ecfg.build,
        layer_seed(cfg.seed, id),
        &cfg.records,
    )?;
    row.median_ri = layer.median_ri();
    row.fraction_ri_ge_1 = Some(layer.fraction_improved());
    Ok(Point {
        row,
        layer: Some(layer),
    })
}

/// Evaluates every grid point of `axis` on the held-out tail of
/// `calibration`. Points run in parallel; rows come back in grid order.
/// A point that fails is reported with its error and the sweep goes on.
///
/// The per-neuron records of `cfg.record_layer` are computed on that
/// layer's dense-model inputs, isolating the layer from upstream pruning.
pub fn run_sweep(
    model: &ToyModel,
    calibration: &Matrix,
    axis: &SweepAxis,
    cfg: &EvalConfig,
) -> Result<SweepReport, EvalError> {
    let (fit, hold) = split_holdout(calibration, cfg.holdout_fraction)?;
    let dense = model.forward(&hold)?;
    let points: Vec<Point> = axis
        .values()
        .par_iter()
        .map(|&v| {
            evaluate_point(model, &fit, &hold, &dense, axis, v, cfg).unwrap_or_else(|e| {
                log::warn!("{} = {v}: {e}", axis.name());
                Point {
                    row: SweepRow {
                        axis: axis.name().into(),
                        value: v,
                        mse_pruned: None,
                        mse_expansion: None,
                        median_ri: None,
                        fraction_ri_ge_1: None,
                        nonzero_weights: None,
                        router_params: None,
                        total_effective: None,
                        error: Some(e.to_string()),
                    },
                    layer: None,
                }
            })
        })
        .collect();
    let (rows, layers) = points.into_iter().map(|p| (p.row, p.layer)).unzip();
    Ok(SweepReport {
        axis: axis.clone(),
        rows,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expansion::{FfnBlock, Linear};
    use crate::numerics::SeededRng;

    fn setup() -> (ToyModel, Matrix) {
        let mut rng = SeededRng::new(1);
        let model = ToyModel::new(vec![FfnBlock {
            up: Linear::new(Matrix::from_fn(16, 8, |_, _| rng.normal() / 8f64.sqrt())),
            down: Linear::new(Matrix::from_fn(8, 16, |_, _| rng.normal() / 4.0)),
            residual: false,
        }])
        .unwrap();
        let x = Matrix::from_fn(8, 400, |_, _| rng.normal());
        (model, x)
    }

    fn small_cfg() -> EvalConfig {
        EvalConfig {
            clusters: 2,
            quant_group: 4,
            records: RecordOptions {
                pair_budget: 500,
                ..RecordOptions::default()
            },
            ..EvalConfig::default()
        }
    }

    #[test]
    fn each_axis_yields_one_row_per_grid_point() {
        let (model, x) = setup();
        for axis in [
            SweepAxis::Sparsity(vec![0.5, 0.9]),
            SweepAxis::Clusters(vec![1, 2]),
            SweepAxis::Bits(vec![3, 4]),
            SweepAxis::KeepDense(vec![0.0, 0.1]),
        ] {
            let rep = run_sweep(&model, &x, &axis, &small_cfg()).unwrap();
            assert_eq!(rep.rows.len(), 2, "{axis:?}");
            assert!(rep.rows.iter().all(|r| r.error.is_none()), "{:?}", rep.rows);
        }
    }

    #[test]
    fn one_cluster_row_has_unit_ri_and_failures_are_recorded() {
        let (model, x) = setup();
        let rep = run_sweep(&model, &x, &SweepAxis::Clusters(vec![1, 1000]), &small_cfg()).unwrap();
        assert_eq!(rep.rows[0].median_ri, Some(1.0));
        assert!(rep.rows[1].error.is_some());
    }

    #[test]
    fn keep_dense_zero_matches_plain_pruning() {
        let (model, x) = setup();
        let cfg = small_cfg();
        let kd = run_sweep(&model, &x, &SweepAxis::KeepDense(vec![0.0]), &cfg).unwrap();
        let sp = run_sweep(&model, &x, &SweepAxis::Sparsity(vec![cfg.sparsity]), &cfg).unwrap();
        assert_eq!(kd.rows[0].mse_pruned, sp.rows[0].mse_pruned);
    }
}
