use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ExpansionError;
use crate::numerics::{dot, Matrix};
use crate::pruner::{compress, HessianAccumulator, PruneSpec, DEFAULT_DAMPING};
use crate::router::{Router, RouterConfig};

/// Weight of the global Hessian mixed into an under-sampled cluster's.
pub const DEFAULT_POOL_ALPHA: f64 = 0.1;

/// Knobs shared by every expanded layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertBuildConfig {
    pub spec: PruneSpec,
    pub damping: f64,
    /// A cluster with fewer than `m` calibration samples uses
    /// `H_j + pool_alpha·H_global` (only when there is more than one
    /// cluster).
    pub pool_alpha: f64,
    pub router: RouterConfig,
}

impl ExpertBuildConfig {
    pub fn new(spec: PruneSpec) -> Self {
        Self {
            spec,
            damping: DEFAULT_DAMPING,
            pool_alpha: DEFAULT_POOL_ALPHA,
            router: RouterConfig::default(),
        }
    }
}

/// How each expert of a layer was calibrated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertProvenance {
    pub spec: PruneSpec,
    pub seed: u64,
    /// Calibration columns routed to each cluster.
    pub cluster_sizes: Vec<usize>,
    /// Whether each expert's Hessian was pooled with the global one.
    pub pooled: Vec<bool>,
}

/// A dense linear layer replaced by a router and `c` sparse copies.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertLayer {
    pub router: Router,
    pub experts: Vec<Matrix>,
    /// Quantization scales per expert, when quantized.
    pub scales: Vec<Option<Matrix>>,
    pub bias: Option<Vec<f64>>,
    pub provenance: ExpertProvenance,
}

/// Prunes one copy of `w` per cluster, each against the Hessian of the
/// calibration columns labelled with that cluster.
///
/// Expert `j` depends only on `w`, the columns with label `j` (in their
/// original relative order) and the config, except when pooling mixes in
/// the global Hessian.
pub fn build_experts(
    w: &Matrix,
    x: &Matrix,
    labels: &[usize],
    c: usize,
    cfg: &ExpertBuildConfig,
) -> Result<(Vec<Matrix>, Vec<Option<Matrix>>, Vec<bool>), ExpansionError> {
    let m = w.cols();
    if x.rows() != m || labels.len() != x.cols() {
        return Err(ExpansionError::Shape(format!(
            "weights {:?}, inputs {:?}, {} labels",
            w.shape(),
            x.shape(),
            labels.len()
        )));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (col, &l) in labels.iter().enumerate() {
        members[l].push(col);
    }
    let pool_needed = c > 1 && members.iter().any(|idx| idx.len() < m);
    let global = if pool_needed {
        let mut g = HessianAccumulator::new(m);
        g.add(x)?;
        Some(g)
    } else {
        None
    };
    let built: Vec<(Matrix, Option<Matrix>, bool)> = members
        .par_iter()
        .map(|idx| {
            let mut acc = HessianAccumulator::new(m);
            if !idx.is_empty() {
                acc.add(&x.select_columns(idx))?;
            }
            let pooled = c > 1 && idx.len() < m;
            if pooled {
                let g = global.as_ref().expect("global Hessian built when pooling");
                acc = acc.pooled(g, cfg.pool_alpha);
            }
            let h = acc.finalize(cfg.damping)?;
            let (weights, scales) = compress(w, &h, &cfg.spec)?;
            Ok((weights, scales, pooled))
        })
        .collect::<Result<_, ExpansionError>>()?;
    let mut experts = Vec::with_capacity(c);
    let mut scales = Vec::with_capacity(c);
    let mut pooled = Vec::with_capacity(c);
    for (e, s, p) in built {
        experts.push(e);
        scales.push(s);
        pooled.push(p);
    }
    Ok((experts, scales, pooled))
}

/// Fits a router with `c` clusters on the layer's calibration inputs and
/// builds one pruned expert per cluster.
pub fn expand_layer(
    w: &Matrix,
    bias: Option<&[f64]>,
    x: &Matrix,
    c: usize,
    cfg: &ExpertBuildConfig,
    seed: u64,
) -> Result<ExpertLayer, ExpansionError> {
    if c == 0 || x.cols() < c {
        return Err(ExpansionError::TooFewCalibration {
            samples: x.cols(),
            clusters: c,
        });
    }
    cfg.spec.validate(w.cols())?;
    let router_cfg = RouterConfig {
        seed,
        ..cfg.router.clone()
    };
    let router = Router::fit(x, c, &router_cfg)?;
    let labels = router.route_all(x)?;
    let (experts, scales, pooled) = build_experts(w, x, &labels, c, cfg)?;
    let mut cluster_sizes = vec![0; c];
    for &l in &labels {
        cluster_sizes[l] += 1;
    }
    Ok(ExpertLayer {
        router,
        experts,
        scales,
        bias: bias.map(<[f64]>::to_vec),
        provenance: ExpertProvenance {
            spec: cfg.spec.clone(),
            seed,
            cluster_sizes,
            pooled,
        },
    })
}

impl ExpertLayer {
    pub fn clusters(&self) -> usize {
        self.experts.len()
    }

    pub fn in_dim(&self) -> usize {
        self.experts[0].cols()
    }

    pub fn out_dim(&self) -> usize {
        self.experts[0].rows()
    }

    /// Routes each column of `x` and applies its expert.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix, ExpansionError> {
        let labels = self.router.route_all(x)?;
        self.forward_with_labels(x, &labels)
    }

    /// Applies `experts[labels[j]]` to column `j`. Each output entry is a
    /// single [`dot`] of an expert row with the input column, which is
    /// exactly how a dense matmul computes it.
    pub fn forward_with_labels(
        &self,
        x: &Matrix,
        labels: &[usize],
    ) -> Result<Matrix, ExpansionError> {
        if x.rows() != self.in_dim() || labels.len() != x.cols() {
            return Err(ExpansionError::Shape(format!(
                "expert layer expects {} rows, got {:?} with {} labels",
                self.in_dim(),
                x.shape(),
                labels.len()
            )));
        }
        let (n, s) = (self.out_dim(), x.cols());
        let xt = x.transpose();
        let cols: Vec<Vec<f64>> = (0..s)
            .into_par_iter()
            .map(|j| {
                let e = &self.experts[labels[j]];
                let xj = xt.row(j);
                (0..n)
                    .map(|i| {
                        let v = dot(e.row(i), xj);
                        match &self.bias {
                            Some(b) => v + b[i],
                            None => v,
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Matrix::from_fn(n, s, |i, j| cols[j][i]))
    }

    pub fn nonzero_weights(&self) -> usize {
        self.experts.iter().map(Matrix::count_nonzeros).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use crate::pruner::{accumulate_hessian, sparsegpt_prune};

    fn data(seed: u64, m: usize, s: usize) -> Matrix {
        let mut rng = SeededRng::new(seed);
        Matrix::from_fn(m, s, |_, _| rng.normal())
    }

    #[test]
    fn single_cluster_is_plain_pruning() {
        let x = data(1, 8, 64);
        let w = data(2, 5, 8);
        let cfg = ExpertBuildConfig::new(PruneSpec::unstructured(0.5));
        let layer = expand_layer(&w, None, &x, 1, &cfg, 3).unwrap();
        let h = accumulate_hessian(&x, cfg.damping).unwrap();
        let direct = sparsegpt_prune(&w, &h, &cfg.spec).unwrap();
        assert_eq!(layer.experts[0], direct);
        assert_eq!(layer.forward(&x).unwrap(), direct.matmul(&x).unwrap());
        assert_eq!(layer.provenance.pooled, vec![false]);
    }

    #[test]
    fn zero_sparsity_experts_equal_dense() {
        let x = data(4, 6, 80);
        let w = data(5, 4, 6);
        let cfg = ExpertBuildConfig::new(PruneSpec::unstructured(0.0));
        let layer = expand_layer(&w, Some(&[0.5, 0.0, -1.0, 2.0]), &x, 3, &cfg, 0).unwrap();
        assert!(layer.experts.iter().all(|e| *e == w));
        let mut dense = w.matmul(&x).unwrap();
        dense.add_row_bias(&[0.5, 0.0, -1.0, 2.0]);
        assert_eq!(layer.forward(&x).unwrap(), dense);
    }

    #[test]
    fn duplicate_columns_give_duplicate_outputs() {
        let x = data(6, 4, 40);
        let w = data(7, 3, 4);
        let cfg = ExpertBuildConfig::new(PruneSpec::unstructured(0.5));
        let layer = expand_layer(&w, None, &x, 4, &cfg, 1).unwrap();
        let dup = x.select_columns(&[5, 5, 9, 5]);
        let y = layer.forward(&dup).unwrap();
        assert_eq!(y.col(0), y.col(1));
        assert_eq!(y.col(0), y.col(3));
        // batch and one-at-a-time agree
        let one = layer.forward(&x.select_columns(&[9])).unwrap();
        assert_eq!(one.col(0), y.col(2));
    }

    #[test]
    fn too_few_calibration_columns() {
        let cfg = ExpertBuildConfig::new(PruneSpec::unstructured(0.5));
        assert!(matches!(
            expand_layer(&data(0, 2, 2), None, &data(1, 2, 3), 4, &cfg, 0),
            Err(ExpansionError::TooFewCalibration { .. })
        ));
    }
}
