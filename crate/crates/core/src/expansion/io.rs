use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::expert::{ExpertLayer, ExpertProvenance};
use super::model::{FfnBlock, LayerId, Linear, ToyModel};
use super::pipeline::{ExpandedBlock, ExpandedModel};
use super::ExpansionError;
use crate::numerics::{read_tensor, write_tensor, Matrix};
use crate::router::Router;

const MANIFEST: &str = "model.json";

/// Contents of `model.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelManifest {
    Dense {
        blocks: Vec<BlockManifest<DenseLayerManifest>>,
    },
    Expanded {
        seed: u64,
        /// Calibration inputs of layer ℓ came from the already expanded
        /// layers before it, not from the dense model.
        calibration_propagation: String,
        blocks: Vec<BlockManifest<ExpertLayerManifest>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockManifest<L> {
    pub up: L,
    pub down: L,
    pub residual: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayerManifest {
    pub rows: usize,
    pub cols: usize,
    pub weight: String,
    pub bias: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertLayerManifest {
    pub rows: usize,
    pub cols: usize,
    pub clusters: usize,
    pub router: String,
    pub experts: Vec<String>,
    pub scales: Vec<Option<String>>,
    pub bias: Option<String>,
    pub provenance: ExpertProvenance,
}

fn write_manifest(dir: &Path, mf: &ModelManifest) -> Result<(), ExpansionError> {
    fs::create_dir_all(dir).map_err(|source| ExpansionError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(mf)? + "\n";
    fs::write(&path, text).map_err(|source| ExpansionError::Io { path, source })
}

fn read_manifest(dir: &Path) -> Result<ModelManifest, ExpansionError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|source| ExpansionError::Io { path, source })?;
    Ok(serde_json::from_str(&text)?)
}

fn write_bias(dir: &Path, stem: &str, bias: Option<&[f64]>) -> Result<Option<String>, ExpansionError> {
    match bias {
        Some(b) => {
            let name = format!("{stem}.bias.spxt");
            write_tensor(&Matrix::from_rows(&[b]), dir.join(&name))?;
            Ok(Some(name))
        }
        None => Ok(None),
    }
}

fn read_bias(dir: &Path, name: &Option<String>) -> Result<Option<Vec<f64>>, ExpansionError> {
    name.as_ref()
        .map(|n| Ok(read_tensor(dir.join(n))?.into_vec()))
        .transpose()
}

fn check_shape(m: &Matrix, rows: usize, cols: usize, what: &str) -> Result<(), ExpansionError> {
    if m.shape() != (rows, cols) {
        return Err(ExpansionError::Manifest(format!(
            "{what}: expected {rows}×{cols}, found {:?}",
            m.shape()
        )));
    }
    Ok(())
}

/// Writes a dense model: `model.json` plus one tensor per weight and bias.
/// Values are stored as f32.
pub fn save_dense_model(model: &ToyModel, dir: &Path) -> Result<(), ExpansionError> {
    let mut blocks = Vec::new();
    for (i, b) in model.blocks.iter().enumerate() {
        let layer = |id: LayerId, lin: &Linear| -> Result<DenseLayerManifest, ExpansionError> {
            let weight = format!("{id}.weight.spxt");
            write_tensor(&lin.weight, dir.join(&weight))?;
            Ok(DenseLayerManifest {
                rows: lin.out_dim(),
                cols: lin.in_dim(),
                weight,
                bias: write_bias(dir, &id.to_string(), lin.bias.as_deref())?,
            })
        };
        fs::create_dir_all(dir).map_err(|source| ExpansionError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        blocks.push(BlockManifest {
            up: layer(LayerId::up(i), &b.up)?,
            down: layer(LayerId::down(i), &b.down)?,
            residual: b.residual,
        });
    }
    write_manifest(dir, &ModelManifest::Dense { blocks })
}

pub fn load_dense_model(dir: &Path) -> Result<ToyModel, ExpansionError> {
    let ModelManifest::Dense { blocks } = read_manifest(dir)? else {
        return Err(ExpansionError::Manifest("expected a dense model".into()));
    };
    let layer = |l: &DenseLayerManifest| -> Result<Linear, ExpansionError> {
        let weight = read_tensor(dir.join(&l.weight))?;
        check_shape(&weight, l.rows, l.cols, &l.weight)?;
        Ok(Linear {
            weight,
            bias: read_bias(dir, &l.bias)?,
        })
    };
    let blocks = blocks
        .iter()
        .map(|b| {
            Ok(FfnBlock {
                up: layer(&b.up)?,
                down: layer(&b.down)?,
                residual: b.residual,
            })
        })
        .collect::<Result<_, ExpansionError>>()?;
    ToyModel::new(blocks)
}

/// Writes an expanded model: `model.json`, a router per layer and one
/// tensor per expert (plus scales when quantized).
pub fn save_expanded_model(model: &ExpandedModel, dir: &Path) -> Result<(), ExpansionError> {
    fs::create_dir_all(dir).map_err(|source| ExpansionError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let layer = |id: LayerId, l: &ExpertLayer| -> Result<ExpertLayerManifest, ExpansionError> {
        let stem = id.to_string();
        l.router.save(dir, &stem)?;
        let mut experts = Vec::new();
        let mut scales = Vec::new();
        for (j, (e, s)) in l.experts.iter().zip(&l.scales).enumerate() {
            let name = format!("{stem}.expert{j}.spxt");
            write_tensor(e, dir.join(&name))?;
            experts.push(name);
            scales.push(match s {
                Some(s) => {
                    let name = format!("{stem}.expert{j}.scales.spxt");
                    write_tensor(s, dir.join(&name))?;
                    Some(name)
                }
                None => None,
            });
        }
        Ok(ExpertLayerManifest {
            rows: l.out_dim(),
            cols: l.in_dim(),
            clusters: l.clusters(),
            router: stem.clone(),
            experts,
            scales,
            bias: write_bias(dir, &stem, l.bias.as_deref())?,
            provenance: l.provenance.clone(),
        })
    };
    let blocks = model
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            Ok(BlockManifest {
                up: layer(LayerId::up(i), &b.up)?,
                down: layer(LayerId::down(i), &b.down)?,
                residual: b.residual,
            })
        })
        .collect::<Result<_, ExpansionError>>()?;
    write_manifest(
        dir,
        &ModelManifest::Expanded {
            seed: model.seed,
            calibration_propagation: "compressed".into(),
            blocks,
        },
    )
}

pub fn load_expanded_model(dir: &Path) -> Result<ExpandedModel, ExpansionError> {
    let ModelManifest::Expanded { seed, blocks, .. } = read_manifest(dir)? else {
        return Err(ExpansionError::Manifest("expected an expanded model".into()));
    };
    let layer = |l: &ExpertLayerManifest| -> Result<ExpertLayer, ExpansionError> {
        if l.experts.len() != l.clusters || l.scales.len() != l.clusters || l.clusters == 0 {
            return Err(ExpansionError::Manifest(format!(
                "layer {} lists {} experts for {} clusters",
                l.router,
                l.experts.len(),
                l.clusters
            )));
        }
        let router = Router::load(dir, &l.router)?;
        if router.clusters() != l.clusters || router.input_dim() != l.cols {
            return Err(ExpansionError::Manifest(format!(
                "router {} does not match its layer",
                l.router
            )));
        }
        let experts = l
            .experts
            .iter()
            .map(|name| {
                let e = read_tensor(dir.join(name))?;
                check_shape(&e, l.rows, l.cols, name)?;
                Ok(e)
            })
            .collect::<Result<Vec<_>, ExpansionError>>()?;
        let scales = l
            .scales
            .iter()
            .map(|s| s.as_ref().map(|n| read_tensor(dir.join(n))).transpose())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ExpertLayer {
            router,
            experts,
            scales,
            bias: read_bias(dir, &l.bias)?,
            provenance: l.provenance.clone(),
        })
    };
    let blocks = blocks
        .iter()
        .map(|b| {
            Ok(ExpandedBlock {
                up: layer(&b.up)?,
                down: layer(&b.down)?,
                residual: b.residual,
            })
        })
        .collect::<Result<_, ExpansionError>>()?;
    Ok(ExpandedModel { blocks, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expansion::{expand_model, ExpansionConfig};
    use crate::numerics::{codec::round_to_f32, SeededRng};
    use crate::pruner::PruneSpec;

    fn small_model() -> ToyModel {
        let mut rng = SeededRng::new(1);
        let mut f32ish = |r: usize, c: usize| {
            round_to_f32(&Matrix::from_fn(r, c, |_, _| rng.normal()))
        };
        ToyModel::new(vec![FfnBlock {
            up: Linear {
                weight: f32ish(8, 4),
                bias: Some(vec![0.5; 8]),
            },
            down: Linear::new(f32ish(4, 8)),
            residual: true,
        }])
        .unwrap()
    }

    #[test]
    fn dense_round_trip() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        save_dense_model(&model, dir.path()).unwrap();
        assert_eq!(load_dense_model(dir.path()).unwrap(), model);
        assert!(load_expanded_model(dir.path()).is_err());
    }

    #[test]
    fn expanded_round_trip_routes_identically() {
        let model = small_model();
        let mut rng = SeededRng::new(2);
        let x = round_to_f32(&Matrix::from_fn(4, 60, |_, _| rng.normal()));
        let cfg = ExpansionConfig::new(PruneSpec::unstructured(0.5).with_bits(Some(4), 4), 3, 5);
        let expanded = expand_model(&model, &x, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_expanded_model(&expanded, dir.path()).unwrap();
        let back = load_expanded_model(dir.path()).unwrap();
        assert_eq!(back.blocks.len(), 1);
        assert_eq!(back.seed, 5);
        let l = &back.blocks[0].up;
        assert_eq!(l.clusters(), 3);
        assert!(l.scales.iter().all(Option::is_some));
        assert_eq!(
            l.router.route_all(&x).unwrap(),
            expanded.blocks[0].up.router.route_all(&x).unwrap()
        );
        let text = std::fs::read_to_string(dir.path().join("model.json")).unwrap();
        assert!(text.contains("\"calibration_propagation\": \"compressed\""));
    }
}
