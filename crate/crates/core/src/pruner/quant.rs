use super::PrunerError;
use crate::numerics::Matrix;

/// Quantized weights and the per-group scales that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub values: Matrix,
    /// `rows × ⌈cols / quant_group⌉`.
    pub scales: Matrix,
}

/// Symmetric round-to-nearest quantization in groups of `quant_group`
/// consecutive weights within a row.
///
/// `scale = max|w| / (2^(bits−1) − 1)` per group and `ŵ = round(w/scale)·scale`,
/// so `|ŵ − w| ≤ scale/2` and zeros stay zero. An all-zero group gets
/// scale 0 and passes through.
pub fn rtn_quantize(w: &Matrix, bits: u8, quant_group: usize) -> Result<Quantized, PrunerError> {
    if !(2..=8).contains(&bits) {
        return Err(PrunerError::InvalidSpec(format!("bits {bits} outside 2..=8")));
    }
    if quant_group == 0 {
        return Err(PrunerError::InvalidSpec("quant_group must be ≥ 1".into()));
    }
    let qmax = ((1u32 << (bits - 1)) - 1) as f64;
    let groups = w.cols().div_ceil(quant_group);
    let mut values = w.clone();
    let mut scales = Matrix::zeros(w.rows(), groups);
    for r in 0..w.rows() {
        let row = values.row_mut(r);
        for (g, chunk) in row.chunks_mut(quant_group).enumerate() {
            let amax = chunk.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if amax == 0.0 {
                continue;
            }
            let scale = amax / qmax;
            for v in chunk.iter_mut() {
                let q = (*v / scale).round().clamp(-qmax, qmax);
                *v = q * scale;
            }
            scales.set(r, g, scale);
        }
    }
    Ok(Quantized { values, scales })
}
