//! Seeded synthetic workloads: clustered calibration inputs and FFN stacks
//! whose chosen neurons have strongly non-Gaussian outputs.
//!
//! Inputs are a mixture of `n_clusters_true` components. Cluster means lie
//! in an "offset" subspace at norm `mean_norm`; each cluster also spreads
//! along its own subset of a shared subspace, with isotropic noise on top.
//! A planted neuron reads out a signed combination of the cluster means, so
//! its output over the calibration set splits into separate modes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expansion::{gelu, ExpansionError, FfnBlock, Linear, ToyModel};
use crate::metrics::{GaussianReference, MetricsError};
use crate::numerics::{dot, solve_spd, Matrix, NumericsError, SeededRng};

/// Planted neurons whose best construction stays below this WD fail.
pub const PLANT_MIN_WD: f64 = 0.3;
/// Sign draws tried per planted neuron.
pub const PLANT_TRIES: usize = 100;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error("block {block} neuron {neuron}: best WD {best_wd:.3} after {tries} tries")]
    PlantFailed {
        block: usize,
        neuron: usize,
        best_wd: f64,
        tries: usize,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Expansion(#[from] ExpansionError),
}

/// Output shape of a planted neuron, set by which cluster signs it uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantedShape {
    /// Signs in {−1, +1}, not all equal.
    #[default]
    Bimodal,
    /// One cluster lifted, the rest at 0: a single far outlier mode.
    HeavyTail,
    /// Signs in {−1, 0, +1}, all three present.
    Trimodal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub d: usize,
    pub d_ff: usize,
    pub depth: usize,
    pub n_clusters_true: usize,
    /// Planted neurons in every up layer.
    pub planted_count: usize,
    pub planted_shape: PlantedShape,
    pub samples: usize,
    /// Norm of every cluster mean.
    pub mean_norm: f64,
    /// Width of the shared subspace clusters spread along.
    pub shared_dims: usize,
    /// Fraction of shared dims active per cluster.
    pub shared_active: f64,
    /// Standard deviation along active shared dims.
    pub shared_scale: f64,
    /// Isotropic noise standard deviation.
    pub noise: f64,
    /// Multiplier on the down-projection columns fed by planted neurons.
    pub readout_gain: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            d: 64,
            d_ff: 256,
            depth: 2,
            n_clusters_true: 8,
            planted_count: 8,
            planted_shape: PlantedShape::Bimodal,
            samples: 8192,
            mean_norm: 8.0,
            shared_dims: 16,
            shared_active: 0.5,
            shared_scale: 3.0,
            noise: 0.3,
            readout_gain: 2.5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::InvalidSpec(msg));
        if self.d == 0 || self.d_ff == 0 || self.depth == 0 {
            return bad("d, d_ff and depth must be positive".into());
        }
        if self.n_clusters_true == 0 {
            return bad("n_clusters_true must be ≥ 1".into());
        }
        if self.planted_count > self.d_ff {
            return bad(format!(
                "planted_count {} exceeds d_ff {}",
                self.planted_count, self.d_ff
            ));
        }
        let min_clusters = match self.planted_shape {
            PlantedShape::Trimodal => 3,
            _ => 2,
        };
        if self.planted_count > 0 && self.n_clusters_true < min_clusters {
            return bad(format!(
                "{:?} planting needs at least {min_clusters} clusters",
                self.planted_shape
            ));
        }
        if self.shared_dims >= self.d {
            return bad(format!(
                "shared_dims {} must be below d {}",
                self.shared_dims, self.d
            ));
        }
        if self.samples < 2 {
            return bad("need at least 2 samples".into());
        }
        if !(self.shared_active > 0.0 && self.shared_active <= 1.0) {
            return bad(format!("shared_active {} outside (0, 1]", self.shared_active));
        }
        for (name, v) in [
            ("mean_norm", self.mean_norm),
            ("shared_scale", self.shared_scale),
            ("noise", self.noise),
            ("readout_gain", self.readout_gain),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and ≥ 0"));
            }
        }
        Ok(())
    }
}

/// Calibration columns together with the mixture component of each.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    /// `d × samples`.
    pub data: Matrix,
    pub labels: Vec<usize>,
}

/// Orthonormal `n×n` basis (columns) from Gram-Schmidt on Gaussian draws.
fn random_basis(n: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v = rng.normals(n);
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(a, c)| *a -= p * c);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    basis
}

/// Mixture-of-Gaussians inputs. Component labels are drawn i.i.d. and the
/// columns then pass through a seeded shuffle.
pub fn gen_calibration(spec: &SynthSpec) -> Result<Calibration, SynthError> {
    spec.validate()?;
    let root = SeededRng::new(spec.seed);
    let mut rng = root.child(0);
    let (d, k, s) = (spec.d, spec.n_clusters_true, spec.samples);
    let dsh = spec.shared_dims;
    let basis = random_basis(d, &mut rng);
    let (shared, offset) = basis.split_at(dsh);

    let means: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let coef = rng.normals(offset.len());
            let mut mu = vec![0.0; d];
            for (c, v) in coef.iter().zip(offset) {
                mu.iter_mut().zip(v).for_each(|(a, b)| *a += c * b);
            }
            let norm = dot(&mu, &mu).sqrt().max(f64::MIN_POSITIVE);
            mu.into_iter().map(|a| a * spec.mean_norm / norm).collect()
        })
        .collect();
    let active = ((spec.shared_active * dsh as f64).round() as usize).clamp(1, dsh.max(1));
    let spread = (dsh as f64 / active as f64).sqrt() * spec.shared_scale;
    let active_dims: Vec<Vec<usize>> = (0..k)
        .map(|_| {
            if dsh == 0 {
                Vec::new()
            } else {
                rng.sample_indices(dsh, active)
            }
        })
        .collect();

    let labels: Vec<usize> = (0..s).map(|_| rng.below(k)).collect();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(s);
    for &l in &labels {
        let mut x = means[l].clone();
        for &a in &active_dims[l] {
            let z = rng.normal() * spread;
            x.iter_mut().zip(&shared[a]).for_each(|(v, b)| *v += z * b);
        }
        for v in x.iter_mut() {
            *v += rng.normal() * spec.noise;
        }
        cols.push(x);
    }
    let order = root.child(1).permutation(s);
    let data = Matrix::from_fn(d, s, |r, c| cols[order[c]][r]);
    let labels = order.iter().map(|&i| labels[i]).collect();
    Ok(Calibration { data, labels })
}

/// A generated model, the calibration set it was planted against and the
/// planted rows of every up layer.
#[derive(Clone, Debug)]
pub struct PlantedModel {
    pub model: ToyModel,
    pub calibration: Calibration,
    /// Sorted planted row indices per block.
    pub planted: Vec<Vec<usize>>,
    /// Output WD of each planted row on its block's calibration input.
    pub planted_wd: Vec<Vec<f64>>,
}

fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn draw_signs(shape: PlantedShape, k: usize, rng: &mut SeededRng) -> Option<Vec<f64>> {
    let signs: Vec<f64> = match shape {
        PlantedShape::Bimodal => (0..k).map(|_| rng.sign()).collect(),
        PlantedShape::HeavyTail => {
            let hot = rng.below(k);
            (0..k).map(|j| f64::from(u8::from(j == hot))).collect()
        }
        PlantedShape::Trimodal => (0..k).map(|_| rng.below(3) as f64 - 1.0).collect(),
    };
    let has = |v: f64| signs.contains(&v);
    let ok = match shape {
        PlantedShape::Bimodal => has(1.0) && has(-1.0),
        PlantedShape::HeavyTail => true,
        PlantedShape::Trimodal => has(1.0) && has(-1.0) && has(0.0),
    };
    ok.then_some(signs)
}

/// Per-cluster means of the columns of `x`, the overall mean and the
/// within-cluster scatter `Σ (x − μ_label)(x − μ_label)ᵀ / s`.
fn cluster_statistics(x: &Matrix, labels: &[usize], k: usize) -> (Vec<Vec<f64>>, Vec<f64>, Matrix) {
    let (m, s) = x.shape();
    let mut sums = vec![vec![0.0; m]; k];
    let mut counts = vec![0usize; k];
    let overall = x.row_means();
    for (c, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for r in 0..m {
            sums[l][r] += x.get(r, c);
        }
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(v, &n)| {
            if n == 0 {
                overall.clone()
            } else {
                v.into_iter().map(|a| a / n as f64).collect()
            }
        })
        .collect();
    let centered = Matrix::from_fn(m, s, |r, c| x.get(r, c) - means[labels[c]][r]);
    let scatter = centered.matmul_transposed(&centered).scale(1.0 / s as f64);
    (means, overall, scatter)
}

/// Builds `depth` FFN blocks over [`gen_calibration`] inputs, planting
/// `planted_count` rows in every up layer.
///
/// A planted row is the discriminant direction
/// `(S_w + εI)⁻¹ Σ_j s_j (μ_j − μ)` for a random sign pattern `s`, with `S_w`
/// the within-cluster scatter of the block's input. Whitening by `S_w`
/// keeps the cluster modes apart after projection. The row is rescaled so
/// its output spread equals the median spread of the random rows. Down
/// layers amplify planted columns by `readout_gain`.
pub fn gen_planted_model(spec: &SynthSpec) -> Result<PlantedModel, SynthError> {
    let calibration = gen_calibration(spec)?;
    let root = SeededRng::new(spec.seed).child(2);
    let k = spec.n_clusters_true;
    let reference = GaussianReference::new(spec.samples)?;
    let mut blocks = Vec::with_capacity(spec.depth);
    let mut planted = Vec::with_capacity(spec.depth);
    let mut planted_wd = Vec::with_capacity(spec.depth);
    let mut x = calibration.data.clone();
    for b in 0..spec.depth {
        let mut rng = root.child(b as u64);
        let nin = x.rows();
        let sd_in = 1.0 / (nin as f64).sqrt();
        let mut up = Matrix::from_fn(spec.d_ff, nin, |_, _| rng.normal() * sd_in);
        let mut rows = rng.sample_indices(spec.d_ff, spec.planted_count);
        rows.sort_unstable();
        let mut wds = Vec::with_capacity(rows.len());
        if !rows.is_empty() {
            let y = up.matmul(&x)?;
            let target = median(y.row_iter().map(population_std).collect());
            let (means, overall, mut scatter) = cluster_statistics(&x, &calibration.labels, k);
            let ridge = 1e-3 * scatter.diagonal().iter().sum::<f64>() / nin as f64;
            for i in 0..nin {
                scatter.set(i, i, scatter.get(i, i) + ridge.max(1e-12));
            }
            for &row in &rows {
                let mut best: Option<(f64, Vec<f64>)> = None;
                for _ in 0..PLANT_TRIES {
                    let Some(signs) = draw_signs(spec.planted_shape, k, &mut rng) else {
                        continue;
                    };
                    let mut v = vec![0.0; nin];
                    for (sg, mu) in signs.iter().zip(&means) {
                        for r in 0..nin {
                            v[r] += sg * (mu[r] - overall[r]);
                        }
                    }
                    let w = solve_spd(&scatter, &v)?;
                    let out = Matrix::from_rows(&[w.as_slice()]).matmul(&x)?;
                    let q = match reference.wd(out.row(0)) {
                        Ok(q) => q,
                        Err(MetricsError::Degenerate) => continue,
                        Err(e) => return Err(e.into()),
                    };
                    if best.as_ref().is_none_or(|(bq, _)| q > *bq) {
                        best = Some((q, w));
                    }
                    if q >= PLANT_MIN_WD {
                        break;
                    }
                }
                let best_wd = best.as_ref().map_or(0.0, |(q, _)| *q);
                let Some((q, w)) = best.filter(|(q, _)| *q >= PLANT_MIN_WD) else {
                    return Err(SynthError::PlantFailed {
                        block: b,
                        neuron: row,
                        best_wd,
                        tries: PLANT_TRIES,
                    });
                };
                let out = Matrix::from_rows(&[w.as_slice()]).matmul(&x)?;
                let scale = target / population_std(out.row(0));
                up.row_mut(row)
                    .iter_mut()
                    .zip(&w)
                    .for_each(|(a, b)| *a = b * scale);
                wds.push(q);
            }
        }
        let sd_hidden = 1.0 / (spec.d_ff as f64).sqrt();
        let mut down = Matrix::from_fn(spec.d, spec.d_ff, |_, _| rng.normal() * sd_hidden);
        for &row in &rows {
            for r in 0..spec.d {
                down.set(r, row, down.get(r, row) * spec.readout_gain);
            }
        }
        x = down.matmul(&up.matmul(&x)?.map(gelu))?;
        if !x.is_finite() {
            return Err(SynthError::InvalidSpec(format!(
                "block {b} produced non-finite activations"
            )));
        }
        blocks.push(FfnBlock {
            up: Linear::new(up),
            down: Linear::new(down),
            residual: false,
        });
        planted.push(rows);
        planted_wd.push(wds);
    }
    Ok(PlantedModel {
        model: ToyModel::new(blocks)?,
        calibration,
        planted,
        planted_wd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{select_wasserstein_neurons, wd_rows, WdReport};

    fn small() -> SynthSpec {
        SynthSpec {
            d: 16,
            d_ff: 32,
            depth: 2,
            n_clusters_true: 4,
            planted_count: 2,
            samples: 1024,
            shared_dims: 4,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn validation() {
        assert!(SynthSpec::default().validate().is_ok());
        let bad = [
            SynthSpec { planted_count: 300, ..SynthSpec::default() },
            SynthSpec { n_clusters_true: 0, ..SynthSpec::default() },
            SynthSpec { n_clusters_true: 1, ..SynthSpec::default() },
            SynthSpec { shared_dims: 64, ..SynthSpec::default() },
            SynthSpec { noise: -1.0, ..SynthSpec::default() },
        ];
        for s in bad {
            assert!(s.validate().is_err(), "{s:?}");
        }
        let single = SynthSpec { n_clusters_true: 1, planted_count: 0, ..SynthSpec::default() };
        assert!(single.validate().is_ok());
    }

    #[test]
    fn calibration_is_seed_deterministic() {
        let a = gen_calibration(&small()).unwrap();
        let b = gen_calibration(&small()).unwrap();
        assert_eq!(a, b);
        let c = gen_calibration(&SynthSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.data, c.data);
        assert_eq!(a.data.shape(), (16, 1024));
        assert!(a.labels.iter().all(|&l| l < 4));
    }

    #[test]
    fn cluster_means_have_requested_norm() {
        let spec = SynthSpec {
            noise: 0.0,
            shared_scale: 0.0,
            ..small()
        };
        let cal = gen_calibration(&spec).unwrap();
        for c in 0..cal.data.cols() {
            let x = cal.data.col(c);
            assert!((dot(&x, &x).sqrt() - spec.mean_norm).abs() < 1e-9);
        }
    }

    #[test]
    fn model_is_deterministic_and_planted_rows_stand_out() {
        let a = gen_planted_model(&small()).unwrap();
        let b = gen_planted_model(&small()).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.planted, b.planted);
        let w = &a.model.blocks[0].up.weight;
        let wd = wd_rows(&w.matmul(&a.calibration.data).unwrap()).unwrap();
        let report = WdReport { layer: "b0.up".into(), wd };
        let top = select_wasserstein_neurons(&report, 2.0 / 32.0).unwrap();
        assert_eq!(top, a.planted[0]);
        assert!(a.planted_wd[0].iter().all(|&q| q >= PLANT_MIN_WD));
    }

    #[test]
    fn every_shape_plants() {
        for shape in [PlantedShape::HeavyTail, PlantedShape::Trimodal] {
            let p = gen_planted_model(&SynthSpec { planted_shape: shape, ..small() }).unwrap();
            assert_eq!(p.planted[0].len(), 2);
        }
    }

    #[test]
    fn no_planting_leaves_gaussian_rows() {
        let p = gen_planted_model(&SynthSpec { planted_count: 0, ..small() }).unwrap();
        assert!(p.planted.iter().all(Vec::is_empty));
        let y = p.model.blocks[0].up.weight.matmul(&p.calibration.data).unwrap();
        assert_eq!(y.rows(), 32);
    }
}
