use crate::numerics::{cholesky_spd, linalg, Matrix};

use super::PrunerError;

/// Default damping as a fraction of the mean Hessian diagonal.
pub const DEFAULT_DAMPING: f64 = 0.01;

/// Running `Σ X·Xᵀ` over calibration batches.
#[derive(Clone, Debug)]
pub struct HessianAccumulator {
    h: Matrix,
    samples: usize,
}

impl HessianAccumulator {
    pub fn new(m: usize) -> Self {
        Self {
            h: Matrix::zeros(m, m),
            samples: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.h.rows()
    }

    pub fn sample_count(&self) -> usize {
        self.samples
    }

    /// Adds `X·Xᵀ` for a batch `X` (m×s). Each entry sums over the batch
    /// columns in order.
    pub fn add(&mut self, x: &Matrix) -> Result<(), PrunerError> {
        if x.rows() != self.dim() {
            return Err(PrunerError::ShapeMismatch {
                op: "hessian",
                expected: (self.dim(), x.cols()),
                found: x.shape(),
            });
        }
        let batch = x.matmul_transposed(x);
        for (a, b) in self.h.as_mut_slice().iter_mut().zip(batch.as_slice()) {
            *a += b;
        }
        self.samples += x.cols();
        Ok(())
    }

    /// `self + alpha·other`. The sample count is the sum of both, so a
    /// cluster with no samples of its own still finalizes.
    pub fn pooled(&self, other: &HessianAccumulator, alpha: f64) -> HessianAccumulator {
        let mut h = self.h.clone();
        for (a, b) in h.as_mut_slice().iter_mut().zip(other.h.as_slice()) {
            *a += alpha * b;
        }
        HessianAccumulator {
            h,
            samples: self.samples + other.samples,
        }
    }

    pub fn raw(&self) -> &Matrix {
        &self.h
    }

    /// Adds `λ·I` with `λ = damping_fraction·mean(diag H)`. Dimensions that
    /// saw no signal (zero diagonal) end at `λ`, or at 1 when `λ` is 0.
    pub fn finalize(&self, damping_fraction: f64) -> Result<HessianState, PrunerError> {
        if self.samples == 0 {
            return Err(PrunerError::EmptyCalibration);
        }
        if !(damping_fraction >= 0.0) {
            return Err(PrunerError::InvalidSpec(format!(
                "damping {damping_fraction} must be ≥ 0"
            )));
        }
        let m = self.dim();
        let diag = self.h.diagonal();
        let lambda = damping_fraction * diag.iter().sum::<f64>() / m.max(1) as f64;
        let mut h = self.h.clone();
        for (i, &d) in diag.iter().enumerate() {
            let v = if d == 0.0 {
                if lambda > 0.0 {
                    lambda
                } else {
                    1.0
                }
            } else {
                d + lambda
            };
            h.set(i, i, v);
        }
        Ok(HessianState {
            h,
            sample_count: self.samples,
            damping_fraction,
            lambda,
        })
    }
}

/// Damped `H = X·Xᵀ`, ready for pruning.
#[derive(Clone, Debug)]
pub struct HessianState {
    pub h: Matrix,
    pub sample_count: usize,
    pub damping_fraction: f64,
    /// The absolute damping that was added.
    pub lambda: f64,
}

/// Builds and finalizes the Hessian of a single calibration batch.
pub fn accumulate_hessian(x: &Matrix, damping_fraction: f64) -> Result<HessianState, PrunerError> {
    let mut acc = HessianAccumulator::new(x.rows());
    acc.add(x)?;
    acc.finalize(damping_fraction)
}

/// `H⁻¹` together with its upper Cholesky factor `U` (`UᵀU = H⁻¹`).
#[derive(Clone, Debug)]
pub struct InverseFactors {
    pub hinv: Matrix,
    pub upper: Matrix,
}

impl HessianState {
    pub fn dim(&self) -> usize {
        self.h.rows()
    }

    /// Inverts `H`, escalating jitter if it is numerically singular.
    pub fn inverse_factors(&self) -> Result<InverseFactors, PrunerError> {
        let (l, _) = cholesky_spd(&self.h, 0.0, linalg::MAX_ESCALATIONS)?;
        let hinv = linalg::spd_inverse_from_cholesky(&l);
        let (lh, _) = cholesky_spd(&hinv, 0.0, linalg::MAX_ESCALATIONS)?;
        Ok(InverseFactors {
            upper: lh.transpose(),
            hinv,
        })
    }
}
