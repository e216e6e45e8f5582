use serde::{Deserialize, Serialize};

use super::obs::smallest;
use super::spec::{PruneSpec, SparsityPattern};
use super::PrunerError;
use crate::numerics::Matrix;

/// Pruners that only choose a mask and never update surviving weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    /// Score `|w_ij|`.
    Magnitude,
    /// Score `|w_ij|·‖X_j‖₂`, with `X_j` the j-th input feature over the
    /// calibration samples.
    Wanda,
}

pub fn baseline_prune(
    w: &Matrix,
    x: Option<&Matrix>,
    method: BaselineMethod,
    spec: &PruneSpec,
) -> Result<Matrix, PrunerError> {
    let m = w.cols();
    spec.validate(m)?;
    let feature_scale: Vec<f64> = match method {
        BaselineMethod::Magnitude => vec![1.0; m],
        BaselineMethod::Wanda => {
            let x = x.ok_or(PrunerError::MissingCalibration)?;
            if x.rows() != m {
                return Err(PrunerError::ShapeMismatch {
                    op: "wanda",
                    expected: (m, x.cols()),
                    found: x.shape(),
                });
            }
            x.row_iter()
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        }
    };
    let mut out = w.clone();
    for r in 0..w.rows() {
        let scores: Vec<f64> = w
            .row(r)
            .iter()
            .zip(&feature_scale)
            .map(|(v, s)| v.abs() * s)
            .collect();
        let row = out.row_mut(r);
        apply_mask(row, &scores, spec);
    }
    Ok(out)
}

/// Zeros the lowest-scoring positions of `row` as the pattern requires.
pub(crate) fn apply_mask(row: &mut [f64], scores: &[f64], spec: &PruneSpec) {
    let m = row.len();
    match spec.pattern {
        SparsityPattern::Unstructured => {
            for j in smallest(scores, spec.zeros_per_row(m)) {
                row[j] = 0.0;
            }
        }
        SparsityPattern::NM {
            zeros_per_group,
            group_size,
        } => {
            for g in (0..m).step_by(group_size) {
                for j in smallest(&scores[g..g + group_size], zeros_per_group) {
                    row[g + j] = 0.0;
                }
            }
        }
    }
}
