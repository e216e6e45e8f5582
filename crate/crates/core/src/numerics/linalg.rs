//! Small dense symmetric solvers: Cholesky, SPD inverse, Jacobi eigen.

use log::debug;

use super::{Matrix, NumericsError};

/// Number of ×10 jitter escalations tried before giving up.
pub const MAX_ESCALATIONS: u32 = 6;

fn require_square(m: &Matrix, op: &'static str) -> Result<usize, NumericsError> {
    if m.rows() != m.cols() {
        return Err(NumericsError::ShapeMismatch {
            op,
            left: m.shape(),
            right: m.shape(),
        });
    }
    Ok(m.rows())
}

/// Lower Cholesky factor of `M + jitter·I`, with no retry.
pub fn cholesky(m: &Matrix, jitter: f64) -> Result<Matrix, NumericsError> {
    let n = require_square(m, "cholesky")?;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m.get(j, j) + jitter;
        for k in 0..j {
            let v = l.get(j, k);
            d -= v * v;
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(NumericsError::NotPositiveDefinite { jitter });
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = m.get(i, j);
            let (ri, rj) = (l.row(i), l.row(j));
            for k in 0..j {
                s -= ri[k] * rj[k];
            }
            l.set(i, j, s / d);
        }
    }
    Ok(l)
}

/// Cholesky with jitter escalation.
///
/// Tries `jitter`, then multiplies it by 10 up to `max_escalations` times.
/// A zero starting jitter escalates from `1e-10·mean(diag M)`. Returns the
/// factor and the jitter that succeeded.
pub fn cholesky_spd(
    m: &Matrix,
    jitter: f64,
    max_escalations: u32,
) -> Result<(Matrix, f64), NumericsError> {
    let n = require_square(m, "cholesky")?;
    match cholesky(m, jitter) {
        Ok(l) => return Ok((l, jitter)),
        Err(NumericsError::NotPositiveDefinite { .. }) if max_escalations > 0 => {}
        Err(e) => return Err(e),
    }
    let mean_diag = m.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n.max(1) as f64;
    let mut j = if jitter > 0.0 {
        jitter
    } else {
        1e-10 * mean_diag.max(f64::MIN_POSITIVE)
    };
    for step in 1..=max_escalations {
        j *= 10.0;
        debug!("cholesky: escalating jitter to {j:e} (step {step})");
        if let Ok(l) = cholesky(m, j) {
            return Ok((l, j));
        }
    }
    Err(NumericsError::NotPositiveDefinite { jitter: j })
}

/// Inverse of a lower-triangular matrix.
pub fn lower_inverse(l: &Matrix) -> Matrix {
    let n = l.rows();
    let mut inv = Matrix::zeros(n, n);
    for j in 0..n {
        inv.set(j, j, 1.0 / l.get(j, j));
        for i in j + 1..n {
            let mut s = 0.0;
            for k in j..i {
                s -= l.get(i, k) * inv.get(k, j);
            }
            inv.set(i, j, s / l.get(i, i));
        }
    }
    inv
}

/// `M⁻¹` for symmetric positive-definite `M`, via its Cholesky factor.
/// The result is exactly symmetric.
pub fn spd_inverse_from_cholesky(l: &Matrix) -> Matrix {
    let n = l.rows();
    let li = lower_inverse(l);
    // M⁻¹ = L⁻ᵀ L⁻¹; entry (i, j) is the dot of columns i and j of L⁻¹,
    // which are nonzero only from max(i, j) down.
    let mut inv = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..n {
                s += li.get(k, i) * li.get(k, j);
            }
            inv.set(i, j, s);
            inv.set(j, i, s);
        }
    }
    inv
}

pub fn spd_inverse(m: &Matrix) -> Result<Matrix, NumericsError> {
    Ok(spd_inverse_from_cholesky(&cholesky(m, 0.0)?))
}

/// Solves `M x = b` for SPD `M`.
pub fn solve_spd(m: &Matrix, b: &[f64]) -> Result<Vec<f64>, NumericsError> {
    let n = require_square(m, "solve_spd")?;
    if b.len() != n {
        return Err(NumericsError::ShapeMismatch {
            op: "solve_spd",
            left: m.shape(),
            right: (b.len(), 1),
        });
    }
    let l = cholesky(m, 0.0)?;
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l.get(i, k) * y[k];
        }
        y[i] = s / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    Ok(x)
}

/// Sample covariance (divisor `s − 1`) of the columns of `x` (m×s), and
/// the column mean.
pub fn covariance(x: &Matrix) -> Result<(Matrix, Vec<f64>), NumericsError> {
    let s = x.cols();
    if s < 2 {
        return Err(NumericsError::Domain {
            what: "covariance sample count",
            value: s as f64,
        });
    }
    let mean = x.row_means();
    let mut centered = x.clone();
    for (r, &mu) in mean.iter().enumerate() {
        centered.row_mut(r).iter_mut().for_each(|v| *v -= mu);
    }
    let cov = centered
        .matmul_transposed(&centered)
        .scale(1.0 / (s - 1) as f64);
    Ok((cov, mean))
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
#[derive(Clone, Debug)]
pub struct SymEig {
    /// Descending.
    pub values: Vec<f64>,
    /// Row `i` is the unit eigenvector for `values[i]`, signed so that its
    /// largest-magnitude entry (first on ties) is positive.
    pub vectors: Matrix,
}

const JACOBI_MAX_SWEEPS: usize = 100;

pub fn sym_eig(m: &Matrix) -> Result<SymEig, NumericsError> {
    let n = require_square(m, "sym_eig")?;
    let mut a = m.clone();
    // Columns of v accumulate the rotations.
    let mut v = Matrix::identity(n);
    let scale = m.frobenius_norm();
    let mut converged = n < 2 || scale == 0.0;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a.get(p, p), a.get(q, q));
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a.get(k, p), a.get(k, q));
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (a.get(p, k), a.get(q, k));
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if !converged {
        return Err(NumericsError::NoConvergence {
            op: "sym_eig",
            iterations: JACOBI_MAX_SWEEPS,
        });
    }
    let diag = a.diagonal();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (r, &i) in order.iter().enumerate() {
        let mut col = v.col(i);
        let mut pivot = 0;
        for k in 1..n {
            if col[k].abs() > col[pivot].abs() {
                pivot = k;
            }
        }
        if col[pivot] < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        vectors.row_mut(r).copy_from_slice(&col);
    }
    Ok(SymEig { values, vectors })
}
