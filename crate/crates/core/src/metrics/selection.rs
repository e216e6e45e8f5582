use super::MetricsError;
use crate::numerics::{covariance, sym_eig, Matrix};

/// Indices of the `⌈fraction·n⌉` largest values, returned in ascending
/// index order. Equal values rank the lower index first.
pub fn top_fraction(values: &[f64], fraction: f64) -> Result<Vec<usize>, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MetricsError::InvalidFraction(fraction));
    }
    let n = values.len();
    let k = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut top = order[..k].to_vec();
    top.sort_unstable();
    Ok(top)
}

/// `Σ sizeᵢ·valueᵢ / Σ sizeᵢ`.
pub fn weighted_cluster_average(values: &[f64], sizes: &[f64]) -> Result<f64, MetricsError> {
    if values.len() != sizes.len() {
        return Err(MetricsError::LengthMismatch {
            left: values.len(),
            right: sizes.len(),
        });
    }
    if sizes.iter().any(|&s| s < 0.0) {
        return Err(MetricsError::NegativeWeight);
    }
    let total: f64 = sizes.iter().sum();
    if !(total > 0.0) {
        return Err(MetricsError::ZeroTotalWeight);
    }
    let acc: f64 = values.iter().zip(sizes).map(|(v, s)| v * s).sum();
    Ok(acc / total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComponentCount {
    pub k: usize,
    /// All samples identical; `k` is 0.
    pub zero_variance: bool,
}

/// Smallest `k` whose leading covariance eigenvalues explain at least
/// `threshold` of the total variance of the columns of `x`.
pub fn min_components_for_variance(
    x: &Matrix,
    threshold: f64,
) -> Result<ComponentCount, MetricsError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(MetricsError::InvalidFraction(threshold));
    }
    if x.cols() < 2 {
        return Err(MetricsError::TooFewSamples {
            needed: 2,
            found: x.cols(),
        });
    }
    let (cov, _) = covariance(x)?;
    let eig = sym_eig(&cov)?;
    Ok(count_components(&eig.values, threshold))
}

/// The counting rule behind [`min_components_for_variance`], on a
/// descending eigenvalue list. Negative round-off eigenvalues count as 0.
pub fn count_components(values: &[f64], threshold: f64) -> ComponentCount {
    let clipped: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(total > 0.0) || total <= 1e-13 * scale * values.len() as f64 {
        return ComponentCount {
            k: 0,
            zero_variance: true,
        };
    }
    // Relative slack so that exactly-attained thresholds (equal shares)
    // are not lost to rounding in the partial sums.
    let target = threshold * total * (1.0 - 1e-10);
    let mut acc = 0.0;
    for (i, v) in clipped.iter().enumerate() {
        acc += v;
        if acc >= target {
            return ComponentCount {
                k: i + 1,
                zero_variance: false,
            };
        }
    }
    ComponentCount {
        k: clipped.len(),
        zero_variance: false,
    }
}

/// Pearson correlation; `None` when either side has zero variance or the
/// lengths differ.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    #[test]
    fn selection_examples() {
        assert_eq!(top_fraction(&[0.1, 0.9, 0.5], 1.0 / 3.0).unwrap(), vec![1]);
        assert_eq!(top_fraction(&[0.1, 0.9, 0.5], 1.0).unwrap(), vec![0, 1, 2]);
        assert_eq!(top_fraction(&[0.5, 0.5], 0.5).unwrap(), vec![0]);
        assert!(top_fraction(&[], 0.5).is_err());
        assert!(top_fraction(&[1.0], 0.0).is_err());
    }

    #[test]
    fn weighted_average_examples() {
        assert_eq!(weighted_cluster_average(&[1.0, 3.0], &[1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(weighted_cluster_average(&[1.0, 3.0], &[3.0, 1.0]).unwrap(), 1.5);
        assert_eq!(weighted_cluster_average(&[0.7], &[5.0]).unwrap(), 0.7);
        assert!(matches!(
            weighted_cluster_average(&[1.0], &[0.0]),
            Err(MetricsError::ZeroTotalWeight)
        ));
    }

    #[test]
    fn rank_two_data_needs_two_components() {
        let mut rng = SeededRng::new(2);
        let a = Matrix::from_fn(200, 2, |_, _| rng.normal());
        let b = Matrix::from_fn(2, 10, |_, _| rng.normal());
        // columns are samples: X = (A·B)ᵀ is 10×200
        let x = a.matmul(&b).unwrap().transpose();
        let c = min_components_for_variance(&x, 0.9).unwrap();
        assert_eq!(c.k, 2);
    }

    #[test]
    fn isotropic_equal_shares() {
        // ±eᵢ for every axis: covariance is exactly a multiple of I
        let m = 10;
        let x = Matrix::from_fn(m, 2 * m, |r, c| {
            if c / 2 == r {
                if c % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            } else {
                0.0
            }
        });
        assert_eq!(min_components_for_variance(&x, 0.9).unwrap().k, 9);
        assert_eq!(min_components_for_variance(&x, 1.0).unwrap().k, 10);
    }

    #[test]
    fn identical_samples_flag_zero_variance() {
        let x = Matrix::from_fn(3, 5, |r, _| r as f64);
        assert_eq!(
            min_components_for_variance(&x, 0.9).unwrap(),
            ComponentCount {
                k: 0,
                zero_variance: true
            }
        );
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), None);
    }
}
