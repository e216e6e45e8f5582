use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use spx_core::evalreport::{AblationSelector, SweepAxis};
use spx_core::expansion::{LayerId, LayerKind, LayerScope};
use spx_core::pruner::{
    PruneSpec, SparsityPattern, DEFAULT_BLOCK_SIZE, DEFAULT_DAMPING, DEFAULT_QUANT_GROUP,
};
use spx_core::synth::SynthSpec;

use crate::bench::BenchConfig;
use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    Sparsegpt,
    Magnitude,
    Wanda,
    KeepDense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Sweep,
    Ablation,
}

/// Every knob of every subcommand. Fields a subcommand does not read are
/// still echoed, so a summary fully describes how to rerun it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub model_dir: Option<PathBuf>,
    /// Calibration tensor (`features × samples`).
    pub data_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub sparsity: f64,
    /// `unstructured` or `kept:group`, e.g. `2:4`.
    pub pattern: String,
    pub bits: Option<u8>,
    pub quant_group: usize,
    pub block_size: usize,
    pub clusters: usize,
    pub pca_dims: Option<usize>,
    pub damping: f64,
    /// 0 uses every core.
    pub thread_count: usize,

    pub method: PruneMethod,
    pub keep_fraction: f64,
    pub scope: LayerScope,

    pub synth: SynthSpec,

    /// Layer to analyze, e.g. `b0.up`; every layer when unset.
    pub layer: Option<String>,
    pub pair_budget: usize,
    pub variance_threshold: f64,
    pub histogram_bins: usize,

    pub eval_mode: EvalMode,
    pub axis: String,
    /// Overrides the axis' default grid.
    pub grid: Option<Vec<f64>>,
    pub holdout_fraction: f64,
    pub record_layer: String,
    pub selectors: Vec<AblationSelector>,
    pub fraction: f64,
    pub ablation_sparsities: Vec<f64>,
    pub random_draws: usize,

    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            model_dir: None,
            data_path: None,
            output_dir: PathBuf::from("out"),
            seed: 0,
            sparsity: 0.5,
            pattern: "unstructured".into(),
            bits: None,
            quant_group: DEFAULT_QUANT_GROUP,
            block_size: DEFAULT_BLOCK_SIZE,
            clusters: 16,
            pca_dims: None,
            damping: DEFAULT_DAMPING,
            thread_count: 0,
            method: PruneMethod::Sparsegpt,
            keep_fraction: 0.0,
            scope: LayerScope::All,
            synth: SynthSpec::default(),
            layer: None,
            pair_budget: 20_000,
            variance_threshold: 0.9,
            histogram_bins: 50,
            eval_mode: EvalMode::Sweep,
            axis: "clusters".into(),
            grid: None,
            holdout_fraction: 0.25,
            record_layer: "b0.up".into(),
            selectors: AblationSelector::ALL.to_vec(),
            fraction: 1.0 / 32.0,
            ablation_sparsities: vec![0.5, 0.7, 0.9],
            random_draws: 5,
            bench: BenchConfig::default(),
        }
    }
}

pub fn parse_layer(s: &str) -> Result<LayerId, CliError> {
    let bad = || CliError::Config(format!("layer {s:?} is not of the form b<block>.up|down"));
    let (block, kind) = s.split_once('.').ok_or_else(bad)?;
    let block: usize = block.strip_prefix('b').ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let kind = match kind {
        "up" => LayerKind::Up,
        "down" => LayerKind::Down,
        _ => return Err(bad()),
    };
    Ok(LayerId { block, kind })
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn prune_spec(&self) -> Result<PruneSpec, CliError> {
        let pattern: SparsityPattern = self
            .pattern
            .parse()
            .map_err(|e: spx_core::pruner::PrunerError| CliError::Config(e.to_string()))?;
        let mut spec = match pattern {
            SparsityPattern::Unstructured => PruneSpec::unstructured(self.sparsity),
            SparsityPattern::NM {
                zeros_per_group,
                group_size,
            } => PruneSpec::nm(zeros_per_group, group_size),
        };
        spec = spec
            .with_block_size(self.block_size)
            .with_bits(self.bits, self.quant_group);
        Ok(spec)
    }

    pub fn sweep_axis(&self) -> Result<SweepAxis, CliError> {
        let default = SweepAxis::by_name(&self.axis).ok_or_else(|| {
            CliError::Config(format!(
                "unknown axis {:?} (sparsity, clusters, bits, keep_dense)",
                self.axis
            ))
        })?;
        let Some(grid) = &self.grid else {
            return Ok(default);
        };
        let whole = |v: f64| v >= 0.0 && v.fract() == 0.0;
        Ok(match default {
            SweepAxis::Sparsity(_) => SweepAxis::Sparsity(grid.clone()),
            SweepAxis::KeepDense(_) => SweepAxis::KeepDense(grid.clone()),
            SweepAxis::Clusters(_) => {
                if !grid.iter().all(|&v| whole(v) && v >= 1.0) {
                    return Err(CliError::Config(format!("cluster grid {grid:?} must be positive integers")));
                }
                SweepAxis::Clusters(grid.iter().map(|&v| v as usize).collect())
            }
            SweepAxis::Bits(_) => {
                if !grid.iter().all(|&v| whole(v) && (1.0..=16.0).contains(&v)) {
                    return Err(CliError::Config(format!("bit grid {grid:?} must be integers in 1..=16")));
                }
                SweepAxis::Bits(grid.iter().map(|&v| v as u8).collect())
            }
        })
    }

    /// Checks ranges that are cheap to verify before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(0.0..=1.0).contains(&self.sparsity) {
            return bad(format!("sparsity {} outside [0, 1]", self.sparsity));
        }
        if self.clusters == 0 {
            return bad("clusters must be ≥ 1".into());
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return bad(format!("damping {} must be finite and ≥ 0", self.damping));
        }
        if !(0.0..1.0).contains(&self.keep_fraction) {
            return bad(format!("keep_fraction {} outside [0, 1)", self.keep_fraction));
        }
        if self.histogram_bins == 0 {
            return bad("histogram_bins must be ≥ 1".into());
        }
        if !(self.variance_threshold > 0.0 && self.variance_threshold <= 1.0) {
            return bad(format!("variance_threshold {} outside (0, 1]", self.variance_threshold));
        }
        if self.pca_dims == Some(0) {
            return bad("pca_dims must be ≥ 1".into());
        }
        self.prune_spec()?;
        parse_layer(&self.record_layer)?;
        if let Some(l) = &self.layer {
            parse_layer(l)?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON of everything that affects
    /// results. The output location and thread count are left out, so the
    /// same experiment always lands in the same run directory.
    pub fn result_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("thread_count");
            map.remove("output_dir");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
