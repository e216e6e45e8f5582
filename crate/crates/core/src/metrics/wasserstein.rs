use rayon::prelude::*;

use super::{MetricsError, NeuronOutputs};
use crate::numerics::{inv_normal_cdf, Matrix};

/// Sorts `v` and rescales it to zero mean and unit population variance.
/// Mean and variance are summed in sorted order, so any permutation of the
/// same multiset standardizes to identical bits.
fn standardize_sorted(v: &mut [f64]) -> Result<(), MetricsError> {
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 0.0) || sd <= 1e-12 * mean.abs() {
        return Err(MetricsError::Degenerate);
    }
    for x in v.iter_mut() {
        *x = (*x - mean) / sd;
    }
    Ok(())
}

/// Midpoint normal quantiles `Φ⁻¹((i − 0.5)/n)`, standardized the same way
/// as the samples they are compared against.
///
/// The raw midpoint quantiles have a population variance slightly below 1,
/// so standardizing both sides is what makes a quantile-matched sample
/// score exactly zero.
#[derive(Clone, Debug)]
pub struct GaussianReference {
    quantiles: Vec<f64>,
}

impl GaussianReference {
    pub fn new(n: usize) -> Result<Self, MetricsError> {
        if n < 2 {
            return Err(MetricsError::TooFewSamples { needed: 2, found: n });
        }
        let mut quantiles = midpoint_quantiles(n);
        standardize_sorted(&mut quantiles)?;
        Ok(Self { quantiles })
    }

    pub fn len(&self) -> usize {
        self.quantiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quantiles.is_empty()
    }

    pub fn quantiles(&self) -> &[f64] {
        &self.quantiles
    }

    /// 1-Wasserstein distance between the standardized empirical
    /// distribution of `samples` and the standard normal.
    pub fn wd(&self, samples: &[f64]) -> Result<f64, MetricsError> {
        if samples.len() != self.quantiles.len() {
            return Err(MetricsError::LengthMismatch {
                left: samples.len(),
                right: self.quantiles.len(),
            });
        }
        let mut z = samples.to_vec();
        standardize_sorted(&mut z)?;
        let total: f64 = z
            .iter()
            .zip(&self.quantiles)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(total / z.len() as f64)
    }
}

/// Unstandardized `Φ⁻¹((i − 0.5)/n)` for `i = 1..=n`.
pub fn midpoint_quantiles(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| inv_normal_cdf((i as f64 - 0.5) / n as f64).expect("midpoint in (0, 1)"))
        .collect()
}

/// Wasserstein distance of one neuron's normalized outputs to `N(0, 1)`.
pub fn wd_to_gaussian(out: &NeuronOutputs) -> Result<f64, MetricsError> {
    GaussianReference::new(out.samples.len())?.wd(&out.samples)
}

/// [`wd_to_gaussian`] for every row of `y` (one neuron per row), sharing
/// a single reference.
pub fn wd_rows(y: &Matrix) -> Result<Vec<f64>, MetricsError> {
    let reference = GaussianReference::new(y.cols())?;
    (0..y.rows())
        .into_par_iter()
        .map(|r| {
            reference.wd(y.row(r)).map_err(|e| match e {
                MetricsError::Degenerate => MetricsError::DegenerateNeuron(r),
                e => e,
            })
        })
        .collect()
}

/// 1-Wasserstein distance between two empirical distributions, with no
/// normalization: `∫ |F_a(t) − F_b(t)| dt` over the merged support.
pub fn wd_empirical(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        // Both CDFs are constant on [prev, next).
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn outputs(v: Vec<f64>) -> NeuronOutputs {
        NeuronOutputs::new(0, v).unwrap()
    }

    #[test]
    fn quantile_matched_input_scores_zero() {
        for n in [2, 3, 10, 101, 1000] {
            let mut q = midpoint_quantiles(n);
            assert_eq!(wd_to_gaussian(&outputs(q.clone())).unwrap(), 0.0);
            q.reverse();
            assert_eq!(wd_to_gaussian(&outputs(q)).unwrap(), 0.0);
        }
    }

    #[test]
    fn two_point_distribution() {
        let mut v = vec![-1.0; 5000];
        v.extend(vec![1.0; 5000]);
        let wd = wd_to_gaussian(&outputs(v)).unwrap();
        assert!((wd - 0.535).abs() <= 0.01, "wd = {wd}");
    }

    #[test]
    fn constant_samples_are_degenerate() {
        assert!(matches!(
            wd_to_gaussian(&outputs(vec![2.0; 10])),
            Err(MetricsError::Degenerate)
        ));
    }

    #[test]
    fn gaussian_draws_score_low() {
        let mut rng = SeededRng::new(11);
        let wd = wd_to_gaussian(&outputs(rng.normals(100_000))).unwrap();
        assert!(wd <= 0.02, "wd = {wd}");
    }

    #[test]
    fn empirical_examples() {
        assert_eq!(wd_empirical(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(wd_empirical(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(wd_empirical(&[0.0, 1.0], &[0.0, 3.0]).unwrap(), 1.0);
        assert!(matches!(wd_empirical(&[], &[1.0]), Err(MetricsError::Empty)));
        // unequal sizes: {0} vs {0, 2} → ½·2
        assert_eq!(wd_empirical(&[0.0], &[0.0, 2.0]).unwrap(), 1.0);
    }

    #[test]
    fn wd_rows_names_degenerate_neuron() {
        let y = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 4.0, 4.0]]);
        assert!(matches!(wd_rows(&y), Err(MetricsError::DegenerateNeuron(1))));
    }
}
