use super::MetricsError;
use crate::numerics::{dot, Matrix, SeededRng};

/// Default cap on the number of input pairs examined per neuron.
pub const DEFAULT_PAIR_BUDGET: usize = 200_000;

/// Distinct sample pairs `(i, j)` with `i < j`, sorted.
///
/// All `C(s, 2)` pairs when that fits in `budget`, otherwise `budget` pairs
/// drawn uniformly without replacement.
pub fn sample_pairs(s: usize, budget: usize, rng: &mut SeededRng) -> Vec<(usize, usize)> {
    let total = s * s.saturating_sub(1) / 2;
    if total <= budget {
        let mut pairs = Vec::with_capacity(total);
        for i in 0..s {
            for j in i + 1..s {
                pairs.push((i, j));
            }
        }
        return pairs;
    }
    let mut idx = rng.sample_indices(total, budget);
    idx.sort_unstable();
    idx.into_iter().map(|k| decode_pair(k, s)).collect()
}

/// Inverse of the row-major enumeration of the strict upper triangle.
fn decode_pair(k: usize, s: usize) -> (usize, usize) {
    // Pairs before row i: i·(2s − i − 1)/2.
    let before = |i: usize| i * (2 * s - i - 1) / 2;
    let sf = s as f64;
    let guess = (sf - 0.5 - ((sf - 0.5).powi(2) - 2.0 * k as f64).max(0.0).sqrt()).floor();
    let mut i = (guess.max(0.0) as usize).min(s - 2);
    while i > 0 && before(i) > k {
        i -= 1;
    }
    while i + 1 < s - 1 && before(i + 1) <= k {
        i += 1;
    }
    (i, i + 1 + (k - before(i)))
}

fn median(v: &mut [f64]) -> f64 {
    let n = v.len();
    v.sort_by(f64::total_cmp);
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Input-side geometry shared by every neuron of a layer: the sampled pairs
/// and their input distances.
#[derive(Clone, Debug)]
pub struct PairGeometry {
    pairs: Vec<(usize, usize)>,
    dx: Vec<f64>,
    n_x: f64,
}

impl PairGeometry {
    pub fn new(x: &Matrix, budget: usize, rng: &mut SeededRng) -> Result<Self, MetricsError> {
        let s = x.cols();
        if s < 2 {
            return Err(MetricsError::TooFewSamples { needed: 2, found: s });
        }
        let xt = x.transpose();
        let pairs = sample_pairs(s, budget, rng);
        let dx: Vec<f64> = pairs
            .iter()
            .map(|&(i, j)| {
                let (a, b) = (xt.row(i), xt.row(j));
                a.iter()
                    .zip(b)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let n_x = dx.iter().copied().fold(0.0, f64::max);
        if n_x == 0.0 {
            return Err(MetricsError::DegeneratePairs);
        }
        Ok(Self { pairs, dx, n_x })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Largest sampled input distance.
    pub fn n_x(&self) -> f64 {
        self.n_x
    }

    /// Mapping difficulty of a neuron whose outputs over the same samples
    /// are `y`.
    ///
    /// Pairs of identical inputs carry no ratio and are left out of the
    /// mean; they still count toward both normalizers.
    pub fn mapping_difficulty(&self, y: &[f64]) -> Result<f64, MetricsError> {
        let dy: Vec<f64> = self.pairs.iter().map(|&(i, j)| (y[i] - y[j]).abs()).collect();
        let n_y = median(&mut dy.clone());
        if !(n_y > 0.0) {
            return Err(MetricsError::DegeneratePairs);
        }
        let mut sum = 0.0;
        let mut used = 0usize;
        for (&d_out, &d_in) in dy.iter().zip(&self.dx) {
            if d_in > 0.0 {
                sum += (d_out / n_y) / (d_in / self.n_x);
                used += 1;
            }
        }
        Ok(sum / used as f64)
    }
}

/// Mapping difficulty of neuron `w` over the columns of `x`.
pub fn mapping_difficulty(
    w: &[f64],
    x: &Matrix,
    pair_budget: usize,
    rng: &mut SeededRng,
) -> Result<f64, MetricsError> {
    let y = neuron_outputs(w, x)?;
    PairGeometry::new(x, pair_budget, rng)?.mapping_difficulty(&y)
}

fn neuron_outputs(w: &[f64], x: &Matrix) -> Result<Vec<f64>, MetricsError> {
    if w.len() != x.rows() {
        return Err(MetricsError::ShapeMismatch {
            weights: (1, w.len()),
            inputs: x.shape(),
        });
    }
    let xt = x.transpose();
    Ok(xt.row_iter().map(|col| dot(w, col)).collect())
}

/// Raw input-similarity / output-distance pairs for scatter plots.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IoPairs {
    /// `(cos(xᵢ, xⱼ), |yᵢ − yⱼ|)`.
    pub pairs: Vec<(f64, f64)>,
    /// Pairs dropped because one input had zero norm.
    pub skipped: usize,
}

pub fn io_pairs(
    w: &[f64],
    x: &Matrix,
    pair_budget: usize,
    rng: &mut SeededRng,
) -> Result<IoPairs, MetricsError> {
    let s = x.cols();
    if s < 2 {
        return Err(MetricsError::TooFewSamples { needed: 2, found: s });
    }
    let y = neuron_outputs(w, x)?;
    let xt = x.transpose();
    let norms2: Vec<f64> = xt.row_iter().map(|c| dot(c, c)).collect();
    let mut out = IoPairs::default();
    for (i, j) in sample_pairs(s, pair_budget, rng) {
        if norms2[i] == 0.0 || norms2[j] == 0.0 {
            out.skipped += 1;
            continue;
        }
        let cos = dot(xt.row(i), xt.row(j)) / (norms2[i] * norms2[j]).sqrt();
        out.pairs.push((cos.clamp(-1.0, 1.0), (y[i] - y[j]).abs()));
    }
    Ok(out)
}
