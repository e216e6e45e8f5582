use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::RouterError;
use crate::numerics::{Matrix, SeededRng};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    /// `c × k`, one centroid per row.
    pub centroids: Matrix,
    pub seed: u64,
    pub iterations_run: usize,
    pub final_inertia: f64,
    /// Inertia after each assignment step, ending with the final centroids.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (ties to the lower index) and the squared
/// distance to it.
pub(crate) fn nearest(centroids: &Matrix, p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.row_iter().enumerate() {
        let d = sq_dist(c, p);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(centroids: &Matrix, points: &Matrix) -> (Vec<usize>, Vec<f64>) {
    (0..points.rows())
        .into_par_iter()
        .map(|i| nearest(centroids, points.row(i)))
        .unzip()
}

/// k-means++ seeding: first centre uniform, each next one drawn with
/// probability proportional to squared distance from the nearest chosen.
fn plus_plus(points: &Matrix, c: usize, rng: &mut SeededRng) -> Matrix {
    let (s, k) = points.shape();
    let mut centroids = Matrix::zeros(c, k);
    let first = rng.below(s);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..s).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    for j in 1..c {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = s - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.below(s)
        };
        centroids.row_mut(j).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    centroids
}

/// Lloyd's algorithm on the columns of `xr` (k×s).
///
/// Stops when the centroid shift, relative to the centroid norm, drops
/// below `tol` or after `max_iter` updates. An empty cluster is reseeded
/// at the point farthest from its current centroid.
pub fn kmeans_fit(
    xr: &Matrix,
    c: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansModel, RouterError> {
    let s = xr.cols();
    if c == 0 || s < c {
        return Err(RouterError::TooFewPoints { points: s, clusters: c });
    }
    let points = xr.transpose();
    let k = points.cols();
    let mut rng = SeededRng::new(seed);
    let mut centroids = plus_plus(&points, c, &mut rng);
    let mut history = Vec::new();
    let mut iterations_run = 0;
    for it in 1..=max_iter {
        let (labels, dists) = assign(&centroids, &points);
        history.push(dists.iter().sum::<f64>());
        let mut sums = Matrix::zeros(c, k);
        let mut counts = vec![0usize; c];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (a, b) in sums.row_mut(l).iter_mut().zip(points.row(i)) {
                *a += b;
            }
        }
        let mut next = Matrix::zeros(c, k);
        let mut taken = vec![false; s];
        for j in 0..c {
            if counts[j] > 0 {
                let n = counts[j] as f64;
                for (a, b) in next.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *a = b / n;
                }
            } else {
                let mut far = None::<(usize, f64)>;
                for (i, &d) in dists.iter().enumerate() {
                    if !taken[i] && far.is_none_or(|(_, b)| d > b) {
                        far = Some((i, d));
                    }
                }
                let (i, _) = far.expect("s ≥ c leaves a free point");
                taken[i] = true;
                next.row_mut(j).copy_from_slice(points.row(i));
            }
        }
        let shift: f64 = (0..c)
            .map(|j| sq_dist(next.row(j), centroids.row(j)))
            .sum::<f64>()
            .sqrt();
        let norm = centroids.frobenius_norm().max(f64::MIN_POSITIVE);
        centroids = next;
        iterations_run = it;
        if shift / norm < tol {
            break;
        }
    }
    let (_, dists) = assign(&centroids, &points);
    let final_inertia = dists.iter().sum::<f64>();
    history.push(final_inertia);
    Ok(KMeansModel {
        centroids,
        seed,
        iterations_run,
        final_inertia,
        inertia_history: history,
    })
}

impl KMeansModel {
    pub fn clusters(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn predict(&self, p: &[f64]) -> usize {
        nearest(&self.centroids, p).0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_separated_clouds() {
        let mut rng = SeededRng::new(1);
        let mut cols = Vec::new();
        for i in 0..60 {
            let base = if i % 2 == 0 { -10.0 } else { 10.0 };
            cols.push([base + 0.1 * rng.normal(), 0.1 * rng.normal()]);
        }
        let x = Matrix::from_rows(&cols).transpose();
        let km = kmeans_fit(&x, 2, 3, 100, 1e-6).unwrap();
        let mut xs: Vec<f64> = km.centroids.row_iter().map(|r| r[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] + 10.0).abs() < 0.1 && (xs[1] - 10.0).abs() < 0.1);
        assert!(km.final_inertia < 60.0 * 0.1);
    }

    #[test]
    fn each_point_its_own_centroid() {
        let x = Matrix::from_rows(&[[0.0, 1.0, 5.0], [0.0, 2.0, -1.0]]);
        let km = kmeans_fit(&x, 3, 0, 100, 1e-6).unwrap();
        assert_eq!(km.final_inertia, 0.0);
    }

    #[test]
    fn identical_points_single_cluster() {
        let x = Matrix::from_fn(2, 5, |r, _| r as f64 + 0.5);
        let km = kmeans_fit(&x, 1, 0, 100, 1e-6).unwrap();
        assert_eq!(km.centroids.row(0), &[0.5, 1.5]);
        assert_eq!(km.final_inertia, 0.0);
    }

    #[test]
    fn too_few_points() {
        let x = Matrix::zeros(2, 2);
        assert!(matches!(
            kmeans_fit(&x, 3, 0, 10, 1e-6),
            Err(RouterError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn inertia_never_increases_and_fit_is_reproducible() {
        let mut rng = SeededRng::new(77);
        let x = Matrix::from_fn(3, 400, |_, _| rng.normal());
        let km = kmeans_fit(&x, 7, 5, 100, 1e-6).unwrap();
        for w in km.inertia_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", km.inertia_history);
        }
        assert_eq!(kmeans_fit(&x, 7, 5, 100, 1e-6).unwrap(), km);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let c = Matrix::from_rows(&[[-1.0], [1.0]]);
        assert_eq!(nearest(&c, &[0.0]).0, 0);
    }
}
