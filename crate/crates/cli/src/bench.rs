//! Single-threaded matrix-vector latency for dense, CSR and packed 2:4
//! layouts, with exact multiply-accumulate counts.

use std::collections::TryReserveError;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use spx_core::numerics::SeededRng;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("cannot allocate {bytes} bytes for a {rows}×{cols} {format} matrix")]
    Allocation {
        rows: usize,
        cols: usize,
        format: BenchFormat,
        bytes: usize,
    },
    #[error("invalid bench config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchFormat {
    #[serde(rename = "dense")]
    Dense,
    #[serde(rename = "csr")]
    Csr,
    #[serde(rename = "packed-2:4")]
    Packed24,
}

impl BenchFormat {
    pub const ALL: [BenchFormat; 3] = [BenchFormat::Dense, BenchFormat::Csr, BenchFormat::Packed24];

    pub fn name(&self) -> &'static str {
        match self {
            BenchFormat::Dense => "dense",
            BenchFormat::Csr => "csr",
            BenchFormat::Packed24 => "packed-2:4",
        }
    }
}

impl std::fmt::Display for BenchFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown format {s:?} (dense, csr, packed-2:4)"))
    }
}

/// Layer shapes from large FFN projections (hidden 4096/8192, intermediate
/// 11008/22016/12288/10240).
pub const DEFAULT_SIZES: [(usize, usize); 4] =
    [(4096, 12288), (4096, 22016), (11008, 4096), (8192, 10240)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub sizes: Vec<(usize, usize)>,
    pub formats: Vec<BenchFormat>,
    /// Zero fraction for CSR; the 2:4 layout is always 50%.
    pub sparsity: f64,
    pub reps: usize,
    pub warmup: usize,
    /// Independent timing rounds used for the stability estimate.
    pub repetitions: usize,
    /// Rounds are stretched beyond `reps` calls until they last this long.
    pub min_round_ms: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: DEFAULT_SIZES.to_vec(),
            formats: BenchFormat::ALL.to_vec(),
            sparsity: 0.5,
            reps: 20,
            warmup: 3,
            repetitions: 3,
            min_round_ms: 50.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub rows: usize,
    pub cols: usize,
    pub format: BenchFormat,
    /// Fraction of stored weights that are zero.
    pub sparsity: f64,
    pub nnz: usize,
    pub macs: usize,
    /// Timed calls per round after stretching to `min_round_ms`.
    pub reps_per_round: usize,
    pub median_ns: f64,
    pub q1_ns: f64,
    pub q3_ns: f64,
    pub iqr_ns: f64,
    /// Coefficient of variation of the per-round medians.
    pub cv_across_repetitions: f64,
}

/// Empty vector with room for `n` elements, or an allocation error.
fn reserve<T>(n: usize, shape: (usize, usize), format: BenchFormat) -> Result<Vec<T>, BenchError> {
    let mut v = Vec::new();
    v.try_reserve_exact(n).map_err(|_: TryReserveError| BenchError::Allocation {
        rows: shape.0,
        cols: shape.1,
        format,
        bytes: n.saturating_mul(std::mem::size_of::<T>()),
    })?;
    Ok(v)
}

/// Wall time of one interleaving slice.
const SLICE_MS: f64 = 5.0;

fn alloc<T: Clone>(
    n: usize,
    fill: T,
    shape: (usize, usize),
    format: BenchFormat,
) -> Result<Vec<T>, BenchError> {
    let mut v = reserve(n, shape, format)?;
    v.resize(n, fill);
    Ok(v)
}

fn checked_len(rows: usize, cols: usize, format: BenchFormat) -> Result<usize, BenchError> {
    rows.checked_mul(cols).ok_or(BenchError::Allocation {
        rows,
        cols,
        format,
        bytes: usize::MAX,
    })
}

/// Row-major f32 weights.
pub struct DenseF32 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl DenseF32 {
    pub fn macs(&self) -> usize {
        self.rows * self.cols
    }

    pub fn matvec(&self, x: &[f32], y: &mut [f32]) {
        for (yi, row) in y.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *yi = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
}

pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<u32>,
    pub values: Vec<f32>,
}

impl Csr {
    pub fn from_dense(d: &DenseF32) -> Result<Self, BenchError> {
        let nnz = d.data.iter().filter(|v| **v != 0.0).count();
        let shape = (d.rows, d.cols);
        let mut col_idx: Vec<u32> = reserve(nnz, shape, BenchFormat::Csr)?;
        let mut values: Vec<f32> = reserve(nnz, shape, BenchFormat::Csr)?;
        let mut row_ptr = Vec::with_capacity(d.rows + 1);
        row_ptr.push(0);
        for row in d.data.chunks_exact(d.cols) {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(j as u32);
                    values.push(v);
                }
            }
            row_ptr.push(values.len());
        }
        Ok(Self {
            rows: d.rows,
            cols: d.cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn macs(&self) -> usize {
        self.nnz()
    }

    pub fn matvec(&self, x: &[f32], y: &mut [f32]) {
        for (r, yi) in y.iter_mut().enumerate() {
            let span = self.row_ptr[r]..self.row_ptr[r + 1];
            *yi = self.col_idx[span.clone()]
                .iter()
                .zip(&self.values[span])
                .map(|(&j, &v)| v * x[j as usize])
                .sum();
        }
    }
}

/// Two values and their in-group positions per aligned group of four.
pub struct Packed24 {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
    pub positions: Vec<u8>,
}

impl Packed24 {
    /// Packs a matrix with at most two nonzeros per aligned group of four.
    /// Groups with fewer nonzeros store explicit zeros.
    pub fn from_dense(d: &DenseF32) -> Result<Self, BenchError> {
        if d.cols % 4 != 0 {
            return Err(BenchError::InvalidConfig(format!(
                "2:4 packing needs cols divisible by 4, got {}",
                d.cols
            )));
        }
        let half = d.data.len() / 2;
        let shape = (d.rows, d.cols);
        let mut values = alloc(half, 0.0f32, shape, BenchFormat::Packed24)?;
        let mut positions = alloc(half, 0u8, shape, BenchFormat::Packed24)?;
        for (g, group) in d.data.chunks_exact(4).enumerate() {
            let mut k = 0;
            for (p, &v) in group.iter().enumerate() {
                if v != 0.0 {
                    if k == 2 {
                        return Err(BenchError::InvalidConfig(
                            "matrix is not 2:4 sparse".into(),
                        ));
                    }
                    values[2 * g + k] = v;
                    positions[2 * g + k] = p as u8;
                    k += 1;
                }
            }
            // pad with distinct positions so every slot is a valid index
            while k < 2 {
                positions[2 * g + k] = if k == 1 && positions[2 * g] == 0 { 1 } else { 0 };
                k += 1;
            }
        }
        Ok(Self {
            rows: d.rows,
            cols: d.cols,
            values,
            positions,
        })
    }

    pub fn macs(&self) -> usize {
        self.rows * self.cols / 2
    }

    pub fn matvec(&self, x: &[f32], y: &mut [f32]) {
        let per_row = self.cols / 2;
        for (r, yi) in y.iter_mut().enumerate() {
            let vals = &self.values[r * per_row..(r + 1) * per_row];
            let pos = &self.positions[r * per_row..(r + 1) * per_row];
            let mut acc = 0.0f32;
            for (g, (v, p)) in vals.chunks_exact(2).zip(pos.chunks_exact(2)).enumerate() {
                let base = 4 * g;
                acc += v[0] * x[base + p[0] as usize] + v[1] * x[base + p[1] as usize];
            }
            *yi = acc;
        }
    }
}

/// Gaussian weights with exactly `⌊s·cols⌋` zeros per row at random
/// positions.
pub fn random_sparse(
    rows: usize,
    cols: usize,
    sparsity: f64,
    rng: &mut SeededRng,
) -> Result<DenseF32, BenchError> {
    let n = checked_len(rows, cols, BenchFormat::Dense)?;
    let mut data = alloc(n, 0.0f32, (rows, cols), BenchFormat::Dense)?;
    let zeros = (sparsity * cols as f64 + 1e-9).floor() as usize;
    for row in data.chunks_exact_mut(cols) {
        for v in row.iter_mut() {
            // keep stored weights away from zero so nnz is exact
            let z = rng.normal() as f32;
            *v = if z == 0.0 { 1.0 } else { z };
        }
        for j in rng.sample_indices(cols, zeros) {
            row[j] = 0.0;
        }
    }
    Ok(DenseF32 { rows, cols, data })
}

/// Gaussian weights with two random zeros in every aligned group of four.
pub fn random_two_four(rows: usize, cols: usize, rng: &mut SeededRng) -> Result<DenseF32, BenchError> {
    if cols % 4 != 0 {
        return Err(BenchError::InvalidConfig(format!(
            "2:4 needs cols divisible by 4, got {cols}"
        )));
    }
    let mut d = random_sparse(rows, cols, 0.0, rng)?;
    for group in d.data.chunks_exact_mut(4) {
        for p in rng.sample_indices(4, 2) {
            group[p] = 0.0;
        }
    }
    Ok(d)
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Collects `repetitions` timing rounds. The rounds are filled round-robin
/// in short slices, so slow host drift lands on every round alike and the
/// spread between round medians reflects the measurement itself.
fn time_rounds(
    cfg: &BenchConfig,
    y: &mut [f32],
    x: &[f32],
    f: &dyn Fn(&[f32], &mut [f32]),
) -> (Vec<f64>, Vec<f64>) {
    let call = |y: &mut [f32]| {
        let t = Instant::now();
        f(black_box(x), black_box(&mut *y));
        black_box(&*y);
        t.elapsed().as_nanos() as f64
    };
    let warm: Vec<f64> = (0..cfg.warmup.max(1)).map(|_| call(y)).collect();
    let per_call = warm.iter().copied().fold(f64::INFINITY, f64::min).max(1.0);
    let reps = cfg.reps.max((cfg.min_round_ms * 1e6 / per_call).ceil() as usize);
    let slice = ((SLICE_MS * 1e6 / per_call).ceil() as usize).clamp(1, reps);
    let mut rounds: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); cfg.repetitions];
    while rounds[cfg.repetitions - 1].len() < reps {
        for round in rounds.iter_mut() {
            let n = slice.min(reps - round.len());
            round.extend((0..n).map(|_| call(y)));
        }
    }
    let mut all = Vec::with_capacity(reps * cfg.repetitions);
    let mut medians = Vec::with_capacity(cfg.repetitions);
    for mut round in rounds {
        round.sort_by(f64::total_cmp);
        medians.push(quantile(&round, 0.5));
        all.extend(round);
    }
    all.sort_by(f64::total_cmp);
    (all, medians)
}

fn coefficient_of_variation(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    var.sqrt() / mean
}

pub fn validate(cfg: &BenchConfig) -> Result<(), BenchError> {
    if cfg.reps < 10 {
        return Err(BenchError::InvalidConfig(format!("reps {} < 10", cfg.reps)));
    }
    if !(cfg.min_round_ms >= 0.0 && cfg.min_round_ms.is_finite()) {
        return Err(BenchError::InvalidConfig(format!("min_round_ms {} must be ≥ 0", cfg.min_round_ms)));
    }
    if cfg.repetitions == 0 {
        return Err(BenchError::InvalidConfig("repetitions must be ≥ 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.sparsity) {
        return Err(BenchError::InvalidConfig(format!(
            "sparsity {} outside [0, 1)",
            cfg.sparsity
        )));
    }
    if let Some((r, c)) = cfg.sizes.iter().find(|(r, c)| *r == 0 || *c == 0) {
        return Err(BenchError::InvalidConfig(format!("empty size {r}×{c}")));
    }
    Ok(())
}

/// Times `y = W·x` for every size and format. Rows come back in
/// `(size, format)` order.
pub fn bench_matvec(cfg: &BenchConfig) -> Result<Vec<BenchRow>, BenchError> {
    validate(cfg)?;
    let mut out = Vec::new();
    for (si, &(rows, cols)) in cfg.sizes.iter().enumerate() {
        let mut rng = SeededRng::new(cfg.seed).child(si as u64);
        let x: Vec<f32> = (0..cols).map(|_| rng.normal() as f32).collect();
        let mut y = alloc(rows, 0.0f32, (rows, cols), BenchFormat::Dense)?;
        for &format in &cfg.formats {
            log::info!("bench {rows}×{cols} {format}");
            let (nnz, macs, (all, medians)) = match format {
                BenchFormat::Dense => {
                    let d = random_sparse(rows, cols, 0.0, &mut rng)?;
                    let nnz = d.data.iter().filter(|v| **v != 0.0).count();
                    (nnz, d.macs(), time_rounds(cfg, &mut y, &x, &|x, y| d.matvec(x, y)))
                }
                BenchFormat::Csr => {
                    let d = random_sparse(rows, cols, cfg.sparsity, &mut rng)?;
                    let csr = Csr::from_dense(&d)?;
                    drop(d);
                    (csr.nnz(), csr.macs(), time_rounds(cfg, &mut y, &x, &|x, y| csr.matvec(x, y)))
                }
                BenchFormat::Packed24 => {
                    let d = random_two_four(rows, cols, &mut rng)?;
                    let p = Packed24::from_dense(&d)?;
                    drop(d);
                    (p.macs(), p.macs(), time_rounds(cfg, &mut y, &x, &|x, y| p.matvec(x, y)))
                }
            };
            let q1 = quantile(&all, 0.25);
            let q3 = quantile(&all, 0.75);
            out.push(BenchRow {
                rows,
                cols,
                format,
                sparsity: 1.0 - nnz as f64 / (rows * cols) as f64,
                nnz,
                macs,
                reps_per_round: all.len() / cfg.repetitions,
                median_ns: quantile(&all, 0.5),
                q1_ns: q1,
                q3_ns: q3,
                iqr_ns: q3 - q1,
                cv_across_repetitions: coefficient_of_variation(&medians),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formats_agree() {
        let mut rng = SeededRng::new(1);
        let d = random_two_four(8, 16, &mut rng).unwrap();
        let csr = Csr::from_dense(&d).unwrap();
        let p = Packed24::from_dense(&d).unwrap();
        let x: Vec<f32> = (0..16).map(|i| i as f32 * 0.25 - 1.0).collect();
        let (mut a, mut b, mut c) = (vec![0.0; 8], vec![0.0; 8], vec![0.0; 8]);
        d.matvec(&x, &mut a);
        csr.matvec(&x, &mut b);
        p.matvec(&x, &mut c);
        for i in 0..8 {
            assert!((a[i] - b[i]).abs() < 1e-5 && (a[i] - c[i]).abs() < 1e-5);
        }
        assert_eq!(csr.nnz(), 64);
        assert_eq!(p.macs(), 64);
        assert_eq!(d.macs(), 128);
    }

    #[test]
    fn mac_counts_are_exact() {
        let cfg = BenchConfig {
            sizes: vec![(10, 40)],
            sparsity: 0.9,
            reps: 10,
            warmup: 1,
            min_round_ms: 0.0,
            ..BenchConfig::default()
        };
        let rows = bench_matvec(&cfg).unwrap();
        assert_eq!(rows[0].macs, 400);
        assert_eq!(rows[1].macs, 40);
        assert_eq!(rows[1].nnz, 40);
        assert_eq!(rows[2].macs, 200);
        assert!(rows.iter().all(|r| r.q1_ns <= r.median_ns && r.median_ns <= r.q3_ns));
    }

    #[test]
    fn rejects_bad_configs() {
        let few = BenchConfig { reps: 3, ..BenchConfig::default() };
        assert!(matches!(bench_matvec(&few), Err(BenchError::InvalidConfig(_))));
        let huge = BenchConfig {
            sizes: vec![(usize::MAX / 2, 4)],
            formats: vec![BenchFormat::Dense],
            reps: 10,
            ..BenchConfig::default()
        };
        assert!(matches!(bench_matvec(&huge), Err(BenchError::Allocation { .. })));
        assert_eq!("packed-2:4".parse::<BenchFormat>().unwrap(), BenchFormat::Packed24);
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.25), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }
}
