use serde::{Deserialize, Serialize};

use super::RouterError;
use crate::numerics::{covariance, dot, sym_eig, Matrix};

/// Principal axes of a set of column vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k × m`, orthonormal rows.
    pub components: Matrix,
    /// Non-increasing; variance captured by each component.
    pub explained_variances: Vec<f64>,
}

impl PcaModel {
    /// Fits the top-`k` eigenvectors of the sample covariance of the
    /// columns of `x` (m×s).
    pub fn fit(x: &Matrix, k: usize) -> Result<Self, RouterError> {
        let (m, s) = x.shape();
        if k == 0 || k > m.min(s) {
            return Err(RouterError::BadComponentCount { k, m, s });
        }
        let (cov, mean) = covariance(x)?;
        let eig = sym_eig(&cov)?;
        let idx: Vec<usize> = (0..k).collect();
        Ok(Self {
            mean,
            components: eig.vectors.select_rows(&idx),
            explained_variances: eig.values[..k].iter().map(|v| v.max(0.0)).collect(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.rows()
    }

    /// `components · (x − mean)` for one vector.
    pub fn transform_vec(&self, x: &[f64]) -> Result<Vec<f64>, RouterError> {
        if x.len() != self.input_dim() {
            return Err(RouterError::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        Ok(self
            .components
            .row_iter()
            .map(|c| dot(c, &centered))
            .collect())
    }

    /// Column-wise [`PcaModel::transform_vec`]: `m×s → k×s`.
    pub fn transform(&self, x: &Matrix) -> Result<Matrix, RouterError> {
        if x.rows() != self.input_dim() {
            return Err(RouterError::DimensionMismatch {
                expected: self.input_dim(),
                found: x.rows(),
            });
        }
        let mut centered = x.clone();
        for (r, &mu) in self.mean.iter().enumerate() {
            centered.row_mut(r).iter_mut().for_each(|v| *v -= mu);
        }
        Ok(self.components.matmul(&centered)?)
    }
}
