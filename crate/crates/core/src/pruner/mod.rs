//! One-shot sparsification: Hessian-aware OBS pruning, mask-only
//! baselines, targeted subsets, keep-dense allocation and round-to-nearest
//! quantization.

mod baseline;
mod hessian;
mod obs;
mod quant;
mod spec;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{read_tensor, write_tensor, CodecError, Matrix, NumericsError};

pub use baseline::{baseline_prune, BaselineMethod};
pub use hessian::{
    accumulate_hessian, HessianAccumulator, HessianState, InverseFactors, DEFAULT_DAMPING,
};
pub use obs::{allocate_keep_dense, prune_neuron_subset, sparsegpt_prune};
pub use quant::{rtn_quantize, Quantized};
pub use spec::{PruneSpec, SparsityPattern, DEFAULT_BLOCK_SIZE, DEFAULT_QUANT_GROUP};

#[derive(Debug, Error)]
pub enum PrunerError {
    #[error("invalid prune spec: {0}")]
    InvalidSpec(String),
    #[error("layer width {width} is not a multiple of n:m group size {group_size}")]
    GroupMismatch { width: usize, group_size: usize },
    #[error("{op}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("row index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("keep-dense allocation infeasible: remaining rows would need sparsity {required}")]
    Infeasible { required: f64 },
    #[error("no calibration samples")]
    EmptyCalibration,
    #[error("this method needs calibration inputs")]
    MissingCalibration,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// OBS pruning followed by quantization when `spec.bits` is set.
/// Returns the weights and, if quantized, the group scales.
pub fn compress(
    w: &Matrix,
    h: &HessianState,
    spec: &PruneSpec,
) -> Result<(Matrix, Option<Matrix>), PrunerError> {
    let pruned = sparsegpt_prune(w, h, spec)?;
    quantize_if_requested(pruned, spec)
}

pub(crate) fn quantize_if_requested(
    w: Matrix,
    spec: &PruneSpec,
) -> Result<(Matrix, Option<Matrix>), PrunerError> {
    match spec.bits {
        Some(bits) => {
            let q = rtn_quantize(&w, bits, spec.quant_group)?;
            Ok((q.values, Some(q.scales)))
        }
        None => Ok((w, None)),
    }
}

/// JSON sidecar stored next to a pruned layer's tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunedLayerMeta {
    pub sparsity: f64,
    /// `unstructured` or `kept:group`, e.g. `2:4`.
    pub pattern: String,
    pub bits: Option<u8>,
    pub quant_group: usize,
    /// Scales tensor file name, relative to the sidecar.
    pub scales_path: Option<String>,
    pub seed: u64,
}

/// Writes `<stem>.spxt`, `<stem>.json` and, when present,
/// `<stem>.scales.spxt` into `dir`.
pub fn save_pruned_layer(
    dir: &Path,
    stem: &str,
    weights: &Matrix,
    scales: Option<&Matrix>,
    spec: &PruneSpec,
    seed: u64,
) -> Result<PrunedLayerMeta, PrunerError> {
    write_tensor(weights, dir.join(format!("{stem}.spxt")))?;
    let scales_path = match scales {
        Some(s) => {
            let name = format!("{stem}.scales.spxt");
            write_tensor(s, dir.join(&name))?;
            Some(name)
        }
        None => None,
    };
    let meta = PrunedLayerMeta {
        sparsity: spec.sparsity,
        pattern: spec.pattern.to_string(),
        bits: spec.bits,
        quant_group: spec.quant_group,
        scales_path,
        seed,
    };
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&meta)?;
    fs::write(&path, text + "\n").map_err(|source| PrunerError::Io { path, source })?;
    Ok(meta)
}

pub fn load_pruned_layer(
    dir: &Path,
    stem: &str,
) -> Result<(Matrix, Option<Matrix>, PrunedLayerMeta), PrunerError> {
    let path = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&path).map_err(|source| PrunerError::Io { path, source })?;
    let meta: PrunedLayerMeta = serde_json::from_str(&text)?;
    let weights = read_tensor(dir.join(format!("{stem}.spxt")))?;
    let scales = match &meta.scales_path {
        Some(p) => Some(read_tensor(dir.join(p))?),
        None => None,
    };
    Ok((weights, scales, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = Matrix::from_rows(&[[0.5, 0.0], [0.0, -0.25]]);
        let s = Matrix::from_rows(&[[0.5], [0.25]]);
        let spec = PruneSpec::unstructured(0.5).with_bits(Some(4), 2);
        let meta = save_pruned_layer(dir.path(), "up0", &w, Some(&s), &spec, 7).unwrap();
        assert_eq!(meta.scales_path.as_deref(), Some("up0.scales.spxt"));
        let (w2, s2, m2) = load_pruned_layer(dir.path(), "up0").unwrap();
        assert_eq!((w2, s2.unwrap(), m2), (w, s, meta));
    }
}
