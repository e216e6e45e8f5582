//! Hessian-aware one-shot pruning.
//!
//! Every row of `W` is pruned independently against the same `H⁻¹`. With
//! `block_size > 1` columns are eliminated left to right; the mask for each
//! block is chosen when the block is reached, from the saliency
//! `w_j² / U_jj²` of the weights as updated so far (`U` is the upper
//! Cholesky factor of `H⁻¹`). With `block_size == 1` the row is pruned by
//! exact greedy OBS: repeatedly remove the free weight of least saliency
//! `w_j² / [H⁻¹]_jj`, compensate the rest, and downdate `H⁻¹`.

use rayon::prelude::*;

use super::hessian::{HessianState, InverseFactors};
use super::spec::{zero_quota, PruneSpec, SparsityPattern};
use super::PrunerError;
use crate::metrics::top_fraction;
use crate::numerics::Matrix;

/// Positions of the `count` smallest `scores`, ties to the lower index.
pub(crate) fn smallest(scores: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

fn check_shapes(w: &Matrix, h: &HessianState) -> Result<(), PrunerError> {
    if w.cols() != h.dim() {
        return Err(PrunerError::ShapeMismatch {
            op: "sparsegpt_prune",
            expected: (w.rows(), h.dim()),
            found: w.shape(),
        });
    }
    Ok(())
}

/// Prunes every row of `w`.
pub fn sparsegpt_prune(
    w: &Matrix,
    h: &HessianState,
    spec: &PruneSpec,
) -> Result<Matrix, PrunerError> {
    let all: Vec<usize> = (0..w.rows()).collect();
    prune_rows(w, h, &all, spec)
}

/// Prunes only the rows in `indices`; every other row is copied unchanged.
pub fn prune_neuron_subset(
    w: &Matrix,
    h: &HessianState,
    indices: &[usize],
    spec: &PruneSpec,
) -> Result<Matrix, PrunerError> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= w.rows()) {
        return Err(PrunerError::IndexOutOfRange {
            index: bad,
            rows: w.rows(),
        });
    }
    prune_rows(w, h, indices, spec)
}

fn prune_rows(
    w: &Matrix,
    h: &HessianState,
    rows: &[usize],
    spec: &PruneSpec,
) -> Result<Matrix, PrunerError> {
    check_shapes(w, h)?;
    spec.validate(w.cols())?;
    let mut out = w.clone();
    if rows.is_empty() || spec.is_identity(w.cols()) {
        return Ok(out);
    }
    let factors = h.inverse_factors()?;
    let mut selected = vec![false; w.rows()];
    for &r in rows {
        selected[r] = true;
    }
    let pruned: Vec<(usize, Vec<f64>)> = (0..w.rows())
        .into_par_iter()
        .filter(|&r| selected[r])
        .map(|r| {
            let mut row = w.row(r).to_vec();
            if spec.block_size == 1 {
                greedy_row(&mut row, &factors.hinv, spec);
            } else {
                blocked_row(&mut row, &factors, spec);
            }
            (r, row)
        })
        .collect();
    for (r, row) in pruned {
        out.row_mut(r).copy_from_slice(&row);
    }
    Ok(out)
}

fn blocked_row(w: &mut [f64], f: &InverseFactors, spec: &PruneSpec) {
    let m = w.len();
    let u = &f.upper;
    let diag: Vec<f64> = (0..m).map(|j| u.get(j, j)).collect();
    let saliency = |w: &[f64], j: usize| w[j] * w[j] / (diag[j] * diag[j]);
    let mut mask = vec![false; m];
    for start in (0..m).step_by(spec.block_size) {
        let end = (start + spec.block_size).min(m);
        if let SparsityPattern::Unstructured = spec.pattern {
            let quota = zero_quota(spec.sparsity, start, end);
            let scores: Vec<f64> = (start..end).map(|j| saliency(w, j)).collect();
            for k in smallest(&scores, quota) {
                mask[start + k] = true;
            }
        }
        for j in start..end {
            if let SparsityPattern::NM {
                zeros_per_group,
                group_size,
            } = spec.pattern
            {
                if j % group_size == 0 {
                    let scores: Vec<f64> = (j..j + group_size).map(|c| saliency(w, c)).collect();
                    for k in smallest(&scores, zeros_per_group) {
                        mask[j + k] = true;
                    }
                }
            }
            if !mask[j] {
                continue;
            }
            let err = w[j] / diag[j];
            let urow = u.row(j);
            for k in j + 1..m {
                w[k] -= err * urow[k];
            }
            w[j] = 0.0;
        }
    }
}

/// Relative gap below which two greedy saliencies are treated as equal.
pub(crate) const TIE_RTOL: f64 = 1e-12;

fn greedy_row(w: &mut [f64], hinv: &Matrix, spec: &PruneSpec) {
    let m = w.len();
    let mut hinv = hinv.clone();
    let mut free = vec![true; m];
    // Zeros still owed per n:m group; unstructured uses one group spanning
    // the whole row.
    let (group_size, mut owed) = match spec.pattern {
        SparsityPattern::Unstructured => (m, vec![spec.zeros_per_row(m)]),
        SparsityPattern::NM {
            zeros_per_group,
            group_size,
        } => (group_size, vec![zeros_per_group; m / group_size]),
    };
    for _ in 0..spec.zeros_per_row(m) {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..m {
            if !free[j] || owed[j / group_size] == 0 {
                continue;
            }
            let s = w[j] * w[j] / hinv.get(j, j);
            // Saliencies equal up to rounding count as tied, and ties keep
            // the lower index.
            if best.is_none_or(|(_, b)| s < b * (1.0 - TIE_RTOL)) {
                best = Some((j, s));
            }
        }
        let (q, _) = best.expect("a prunable weight remains");
        let d = hinv.get(q, q);
        let scale = w[q] / d;
        let col: Vec<f64> = (0..m).map(|k| hinv.get(k, q)).collect();
        for k in 0..m {
            if free[k] {
                w[k] -= scale * col[k];
            }
        }
        // Remove q from the inverse: H⁻¹ ← H⁻¹ − H⁻¹[:,q]·H⁻¹[q,:] / H⁻¹[q,q].
        for a in 0..m {
            if !free[a] || col[a] == 0.0 {
                continue;
            }
            let f = col[a] / d;
            let row = hinv.row_mut(a);
            for b in 0..m {
                row[b] -= f * col[b];
            }
        }
        free[q] = false;
        owed[q / group_size] -= 1;
        w[q] = 0.0;
    }
}

/// Keeps the highest-WD rows dense and prunes the rest harder so that the
/// layer as a whole keeps its target sparsity.
///
/// `keep_fraction` of the rows (rounded up) stay dense. The others are
/// pruned to `s·n / (n − kept)`, which equals `s / (1 − x)` whenever
/// `x·n` is a whole number of rows.
pub fn allocate_keep_dense(
    w: &Matrix,
    h: &HessianState,
    wd: &[f64],
    keep_fraction: f64,
    target_sparsity: f64,
    spec: &PruneSpec,
) -> Result<Matrix, PrunerError> {
    if wd.len() != w.rows() {
        return Err(PrunerError::ShapeMismatch {
            op: "allocate_keep_dense",
            expected: (w.rows(), 1),
            found: (wd.len(), 1),
        });
    }
    if spec.pattern != SparsityPattern::Unstructured {
        return Err(PrunerError::InvalidSpec(
            "keep-dense allocation needs an unstructured pattern".into(),
        ));
    }
    if !(0.0..1.0).contains(&keep_fraction) {
        return Err(PrunerError::InvalidSpec(format!(
            "keep fraction {keep_fraction} outside [0, 1)"
        )));
    }
    let n = w.rows();
    let keep = if keep_fraction > 0.0 {
        top_fraction(wd, keep_fraction).map_err(|e| PrunerError::InvalidSpec(e.to_string()))?
    } else {
        Vec::new()
    };
    let rest: Vec<usize> = (0..n).filter(|r| keep.binary_search(r).is_err()).collect();
    let per_row = if keep.is_empty() {
        target_sparsity
    } else {
        target_sparsity * n as f64 / rest.len().max(1) as f64
    };
    if per_row >= 1.0 || rest.is_empty() {
        return Err(PrunerError::Infeasible {
            required: per_row,
        });
    }
    let row_spec = PruneSpec {
        sparsity: per_row,
        ..spec.clone()
    };
    prune_neuron_subset(w, h, &rest, &row_spec)
}
