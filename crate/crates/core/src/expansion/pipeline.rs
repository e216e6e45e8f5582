use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::expert::{expand_layer, ExpertBuildConfig, ExpertLayer};
use super::model::{gelu, LayerId, Linear, ToyModel};
use super::ExpansionError;
use crate::metrics::{GaussianReference, MetricsError};
use crate::numerics::{Matrix, SeededRng};
use crate::pruner::{
    accumulate_hessian, allocate_keep_dense, baseline_prune, compress, prune_neuron_subset, BaselineMethod, PruneSpec, DEFAULT_DAMPING,
};

/// Experts per layer when nothing else is configured.
pub const DEFAULT_CLUSTERS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionConfig {
    pub clusters: usize,
    /// Per-layer cluster counts keyed by layer name, e.g. `b0.up`.
    #[serde(default)]
    pub cluster_overrides: BTreeMap<String, usize>,
    pub build: ExpertBuildConfig,
    pub seed: u64,
}

impl ExpansionConfig {
    pub fn new(spec: PruneSpec, clusters: usize, seed: u64) -> Self {
        Self {
            clusters,
            cluster_overrides: BTreeMap::new(),
            build: ExpertBuildConfig::new(spec),
            seed,
        }
    }

    pub fn clusters_for(&self, id: LayerId) -> usize {
        self.cluster_overrides
            .get(&id.to_string())
            .copied()
            .unwrap_or(self.clusters)
    }
}

/// Router seed for a layer: a fixed function of the run seed and the
/// layer's position, independent of how many layers came before it.
pub fn layer_seed(seed: u64, id: LayerId) -> u64 {
    SeededRng::new(seed).child(id.ordinal() as u64).next_u64()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpandedBlock {
    pub up: ExpertLayer,
    pub down: ExpertLayer,
    pub residual: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpandedModel {
    pub blocks: Vec<ExpandedBlock>,
    pub seed: u64,
}

impl ExpandedModel {
    pub fn layer(&self, id: LayerId) -> &ExpertLayer {
        let b = &self.blocks[id.block];
        match id.kind {
            super::LayerKind::Up => &b.up,
            super::LayerKind::Down => &b.down,
        }
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        (0..self.blocks.len())
            .flat_map(|b| [LayerId::up(b), LayerId::down(b)])
            .collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix, ExpansionError> {
        let mut x = x.clone();
        for b in &self.blocks {
            let h = b.up.forward(&x)?.map(gelu);
            let mut y = b.down.forward(&h)?;
            if b.residual {
                y = y.add(&x)?;
            }
            x = y;
        }
        Ok(x)
    }
}

fn ensure_finite(m: &Matrix, layer: LayerId) -> Result<(), ExpansionError> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(ExpansionError::NonFinite { layer })
    }
}

/// Expands every linear layer in execution order. Each layer is
/// calibrated on `x0` forwarded through the already expanded prefix.
pub fn expand_model(
    model: &ToyModel,
    x0: &Matrix,
    cfg: &ExpansionConfig,
) -> Result<ExpandedModel, ExpansionError> {
    if x0.cols() == 0 {
        return Err(ExpansionError::TooFewCalibration {
            samples: 0,
            clusters: cfg.clusters,
        });
    }
    if x0.rows() != model.input_dim() {
        return Err(ExpansionError::Shape(format!(
            "model expects {} input rows, calibration has {}",
            model.input_dim(),
            x0.rows()
        )));
    }
    let mut blocks = Vec::with_capacity(model.blocks.len());
    let mut x = x0.clone();
    for (i, b) in model.blocks.iter().enumerate() {
        let expand = |id: LayerId, lin: &Linear, input: &Matrix| {
            log::debug!("expanding {id} with {} clusters", cfg.clusters_for(id));
            expand_layer(
                &lin.weight,
                lin.bias.as_deref(),
                input,
                cfg.clusters_for(id),
                &cfg.build,
                layer_seed(cfg.seed, id),
            )
        };
        let up = expand(LayerId::up(i), &b.up, &x)?;
        let h = up.forward(&x)?.map(gelu);
        ensure_finite(&h, LayerId::up(i))?;
        let down = expand(LayerId::down(i), &b.down, &h)?;
        let mut y = down.forward(&h)?;
        if b.residual {
            y = y.add(&x)?;
        }
        ensure_finite(&y, LayerId::down(i))?;
        blocks.push(ExpandedBlock {
            up,
            down,
            residual: b.residual,
        });
        x = y;
    }
    Ok(ExpandedModel {
        blocks,
        seed: cfg.seed,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub nonzero_weights: usize,
    pub router_params: usize,
    pub total_effective: usize,
}

pub fn count_params(model: &ExpandedModel) -> ParamCount {
    let mut nonzero_weights = 0;
    let mut router_params = 0;
    for id in model.layer_ids() {
        let l = model.layer(id);
        nonzero_weights += l.nonzero_weights();
        router_params += l.router.param_count();
    }
    ParamCount {
        nonzero_weights,
        router_params,
        total_effective: nonzero_weights + router_params,
    }
}

/// Nonzero weights of an unexpanded model; no router.
pub fn count_dense_params(model: &ToyModel) -> ParamCount {
    let nonzero_weights = model
        .blocks
        .iter()
        .map(|b| b.up.weight.count_nonzeros() + b.down.weight.count_nonzeros())
        .sum();
    ParamCount {
        nonzero_weights,
        router_params: 0,
        total_effective: nonzero_weights,
    }
}

/// How each in-scope layer of a dense model is pruned.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerPruner {
    SparseGpt,
    Magnitude,
    Wanda,
    /// Keeps the highest-WD rows dense, prunes the rest harder.
    KeepDense { keep_fraction: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerScope {
    All,
    Up,
    Down,
}

impl LayerScope {
    pub fn contains(&self, id: LayerId) -> bool {
        match self {
            LayerScope::All => true,
            LayerScope::Up => id.kind == super::LayerKind::Up,
            LayerScope::Down => id.kind == super::LayerKind::Down,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequentialPruneOptions {
    pub spec: PruneSpec,
    pub method: LayerPruner,
    pub scope: LayerScope,
    pub damping: f64,
}

impl SequentialPruneOptions {
    pub fn sparsegpt(spec: PruneSpec) -> Self {
        Self {
            spec,
            method: LayerPruner::SparseGpt,
            scope: LayerScope::All,
            damping: DEFAULT_DAMPING,
        }
    }
}

/// Chooses which rows of a layer get pruned, given the layer's weights and
/// its calibration inputs.
pub trait RowSelector: Sync {
    fn select(&self, layer: LayerId, w: &Matrix, x: &Matrix) -> Vec<usize>;
}

/// WD of each row's outputs; rows whose outputs are constant score 0.
fn output_wd(w: &Matrix, x: &Matrix) -> Result<Vec<f64>, ExpansionError> {
    let y = w.matmul(x)?;
    let reference = GaussianReference::new(y.cols())?;
    y.row_iter()
        .map(|r| match reference.wd(r) {
            Ok(v) => Ok(v),
            Err(MetricsError::Degenerate) => Ok(0.0),
            Err(e) => Err(e.into()),
        })
        .collect()
}

fn prune_layer(
    id: LayerId,
    lin: &Linear,
    x: &Matrix,
    opts: &SequentialPruneOptions,
    selector: Option<&dyn RowSelector>,
) -> Result<Matrix, ExpansionError> {
    let w = &lin.weight;
    if let Some(sel) = selector {
        let rows = sel.select(id, w, x);
        let h = accumulate_hessian(x, opts.damping)?;
        return Ok(prune_neuron_subset(w, &h, &rows, &opts.spec)?);
    }
    let out = match opts.method {
        LayerPruner::SparseGpt => {
            let h = accumulate_hessian(x, opts.damping)?;
            compress(w, &h, &opts.spec)?.0
        }
        LayerPruner::Magnitude => baseline_prune(w, None, BaselineMethod::Magnitude, &opts.spec)?,
        LayerPruner::Wanda => baseline_prune(w, Some(x), BaselineMethod::Wanda, &opts.spec)?,
        LayerPruner::KeepDense { keep_fraction } => {
            let h = accumulate_hessian(x, opts.damping)?;
            let wd = output_wd(w, x)?;
            allocate_keep_dense(w, &h, &wd, keep_fraction, opts.spec.sparsity, &opts.spec)?
        }
    };
    Ok(out)
}

/// Prunes the in-scope layers of `model` in execution order, calibrating
/// each on `x0` forwarded through the already pruned prefix. With a
/// selector, only the rows it picks are pruned (always with OBS updates)
/// and `opts.method` is ignored.
pub fn prune_model_sequential(
    model: &ToyModel,
    x0: &Matrix,
    opts: &SequentialPruneOptions,
    selector: Option<&dyn RowSelector>,
) -> Result<ToyModel, ExpansionError> {
    if x0.rows() != model.input_dim() {
        return Err(ExpansionError::Shape(format!(
            "model expects {} input rows, calibration has {}",
            model.input_dim(),
            x0.rows()
        )));
    }
    let mut out = model.clone();
    let mut x = x0.clone();
    for i in 0..out.blocks.len() {
        let up_id = LayerId::up(i);
        if opts.scope.contains(up_id) {
            let w = prune_layer(up_id, &out.blocks[i].up, &x, opts, selector)?;
            out.blocks[i].up.weight = w;
        }
        let h = out.blocks[i].up.forward(&x)?.map(gelu);
        ensure_finite(&h, up_id)?;
        let down_id = LayerId::down(i);
        if opts.scope.contains(down_id) {
            let w = prune_layer(down_id, &out.blocks[i].down, &h, opts, selector)?;
            out.blocks[i].down.weight = w;
        }
        let mut y = out.blocks[i].down.forward(&h)?;
        if out.blocks[i].residual {
            y = y.add(&x)?;
        }
        ensure_finite(&y, down_id)?;
        x = y;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expansion::FfnBlock;

    fn toy(seed: u64, d: usize, dff: usize, depth: usize) -> ToyModel {
        let mut rng = SeededRng::new(seed);
        let blocks = (0..depth)
            .map(|_| FfnBlock {
                up: Linear {
                    weight: Matrix::from_fn(dff, d, |_, _| rng.normal() / (d as f64).sqrt()),
                    bias: Some(rng.normals(dff)),
                },
                down: Linear::new(Matrix::from_fn(d, dff, |_, _| {
                    rng.normal() / (dff as f64).sqrt()
                })),
                residual: false,
            })
            .collect();
        ToyModel::new(blocks).unwrap()
    }

    fn inputs(seed: u64, d: usize, s: usize) -> Matrix {
        let mut rng = SeededRng::new(seed);
        Matrix::from_fn(d, s, |_, _| rng.normal())
    }

    #[test]
    fn one_cluster_matches_sequential_sparsegpt() {
        let model = toy(1, 8, 16, 2);
        let x = inputs(2, 8, 120);
        let spec = PruneSpec::unstructured(0.5);
        let expanded = expand_model(&model, &x, &ExpansionConfig::new(spec.clone(), 1, 9)).unwrap();
        let pruned =
            prune_model_sequential(&model, &x, &SequentialPruneOptions::sparsegpt(spec), None)
                .unwrap();
        for (e, p) in expanded.blocks.iter().zip(&pruned.blocks) {
            assert_eq!(e.up.experts[0], p.up.weight);
            assert_eq!(e.down.experts[0], p.down.weight);
        }
        let probe = inputs(3, 8, 30);
        assert_eq!(expanded.forward(&probe).unwrap(), pruned.forward(&probe).unwrap());
    }

    #[test]
    fn zero_sparsity_reproduces_dense_outputs() {
        let model = toy(4, 6, 12, 2);
        let x = inputs(5, 6, 100);
        let cfg = ExpansionConfig::new(PruneSpec::unstructured(0.0), 4, 1);
        let expanded = expand_model(&model, &x, &cfg).unwrap();
        assert_eq!(expanded.forward(&x).unwrap(), model.forward(&x).unwrap());
    }

    #[test]
    fn reproducible_and_overrides_apply() {
        let model = toy(6, 8, 16, 3);
        let x = inputs(7, 8, 150);
        let mut cfg = ExpansionConfig::new(PruneSpec::unstructured(0.5), 3, 11);
        cfg.cluster_overrides.insert("b1.down".into(), 2);
        let a = expand_model(&model, &x, &cfg).unwrap();
        let b = expand_model(&model, &x, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layer(LayerId::down(1)).clusters(), 2);
        assert_eq!(a.layer(LayerId::up(2)).clusters(), 3);
    }

    #[test]
    fn param_counts() {
        let model = toy(8, 8, 16, 1);
        assert_eq!(count_dense_params(&model).nonzero_weights, 2 * 8 * 16);
        let x = inputs(9, 8, 200);
        let spec = PruneSpec::unstructured(0.5);
        let one = count_params(&expand_model(&model, &x, &ExpansionConfig::new(spec.clone(), 1, 0)).unwrap());
        // ⌊0.5·m⌋ zeros per row and one identity-projection centroid per layer
        assert_eq!(one.nonzero_weights, 16 * 4 + 8 * 8);
        assert_eq!(one.router_params, 8 + 16);
        let many = count_params(&expand_model(&model, &x, &ExpansionConfig::new(spec, 16, 0)).unwrap());
        assert_eq!(many.router_params - one.router_params, 15 * 8 + 15 * 16);
        assert_eq!(many.total_effective, many.nonzero_weights + many.router_params);
    }

    #[test]
    fn non_finite_activation_is_reported() {
        let mut model = toy(10, 4, 8, 2);
        model.blocks[1].up.bias = Some(vec![f64::INFINITY; 8]);
        let x = inputs(11, 4, 40);
        let err = expand_model(&model, &x, &ExpansionConfig::new(PruneSpec::unstructured(0.0), 1, 0))
            .unwrap_err();
        assert!(matches!(err, ExpansionError::NonFinite { layer } if layer == LayerId::up(1)));
    }

    struct FirstRows(usize);
    impl RowSelector for FirstRows {
        fn select(&self, _: LayerId, _: &Matrix, _: &Matrix) -> Vec<usize> {
            (0..self.0).collect()
        }
    }

    #[test]
    fn selector_limits_pruning_to_chosen_rows() {
        let model = toy(12, 8, 16, 1);
        let x = inputs(13, 8, 80);
        let mut opts = SequentialPruneOptions::sparsegpt(PruneSpec::unstructured(0.5));
        opts.scope = LayerScope::Up;
        let out = prune_model_sequential(&model, &x, &opts, Some(&FirstRows(3))).unwrap();
        let w = &out.blocks[0].up.weight;
        for r in 0..16 {
            let zeros = w.row(r).iter().filter(|v| **v == 0.0).count();
            assert_eq!(zeros, if r < 3 { 4 } else { 0 }, "row {r}");
        }
        assert_eq!(out.blocks[0].down, model.blocks[0].down);
    }
}
