//! Input routing: optional PCA reduction followed by k-means assignment.

mod kmeans;
mod pca;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{read_tensor, write_tensor, CodecError, Matrix, NumericsError};

pub use kmeans::{kmeans_fit, KMeansModel, DEFAULT_MAX_ITER, DEFAULT_TOL};
pub use pca::PcaModel;

#[derive(Debug, Error)]
pub enum RouterError {
    #[error("component count {k} outside 1..=min(m = {m}, s = {s})")]
    BadComponentCount { k: usize, m: usize, s: usize },
    #[error("{points} points cannot seed {clusters} clusters")]
    TooFewPoints { points: usize, clusters: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
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

/// Widths at or below this are routed without reduction.
pub const IDENTITY_MAX_DIM: usize = 64;
/// Upper bound on the reduced dimension.
pub const MAX_PCA_DIM: usize = 64;

/// Reduced dimension used when none is requested: `None` (no PCA) for
/// `m ≤ 64`, otherwise `max(1, ⌊m/32⌋)` capped at 64.
pub fn default_pca_dims(m: usize) -> Option<usize> {
    if m <= IDENTITY_MAX_DIM {
        None
    } else {
        Some((m / 32).clamp(1, MAX_PCA_DIM))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Projection {
    Identity { dim: usize },
    Pca(PcaModel),
}

impl Projection {
    pub fn input_dim(&self) -> usize {
        match self {
            Projection::Identity { dim } => *dim,
            Projection::Pca(p) => p.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Projection::Identity { dim } => *dim,
            Projection::Pca(p) => p.output_dim(),
        }
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix, RouterError> {
        match self {
            Projection::Identity { dim } => {
                if x.rows() != *dim {
                    return Err(RouterError::DimensionMismatch {
                        expected: *dim,
                        found: x.rows(),
                    });
                }
                Ok(x.clone())
            }
            Projection::Pca(p) => p.transform(x),
        }
    }

    pub fn transform_vec(&self, x: &[f64]) -> Result<Vec<f64>, RouterError> {
        match self {
            Projection::Identity { dim } => {
                if x.len() != *dim {
                    return Err(RouterError::DimensionMismatch {
                        expected: *dim,
                        found: x.len(),
                    });
                }
                Ok(x.to_vec())
            }
            Projection::Pca(p) => p.transform_vec(x),
        }
    }

    /// `k·m + m` for PCA, 0 for the identity.
    pub fn param_count(&self) -> usize {
        match self {
            Projection::Identity { .. } => 0,
            Projection::Pca(p) => p.output_dim() * p.input_dim() + p.input_dim(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    /// Reduced dimension; `None` applies [`default_pca_dims`].
    pub pca_dims: Option<usize>,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            pca_dims: None,
            seed: 0,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Router {
    pub projection: Projection,
    pub kmeans: KMeansModel,
}

impl Router {
    /// Fits the projection and `c` clusters on the columns of `x` (m×s).
    pub fn fit(x: &Matrix, c: usize, cfg: &RouterConfig) -> Result<Self, RouterError> {
        let m = x.rows();
        let dims = cfg.pca_dims.or_else(|| default_pca_dims(m));
        let projection = match dims {
            Some(k) if k < m => Projection::Pca(PcaModel::fit(x, k)?),
            _ => Projection::Identity { dim: m },
        };
        let reduced = projection.transform(x)?;
        let kmeans = kmeans_fit(&reduced, c, cfg.seed, cfg.max_iter, cfg.tol)?;
        Ok(Self { projection, kmeans })
    }

    pub fn clusters(&self) -> usize {
        self.kmeans.clusters()
    }

    pub fn input_dim(&self) -> usize {
        self.projection.input_dim()
    }

    /// Nearest centroid of the projected input; ties to the lower index.
    pub fn route(&self, x: &[f64]) -> Result<usize, RouterError> {
        Ok(self.kmeans.predict(&self.projection.transform_vec(x)?))
    }

    /// [`Router::route`] for every column of `x`.
    pub fn route_all(&self, x: &Matrix) -> Result<Vec<usize>, RouterError> {
        if x.rows() != self.input_dim() {
            return Err(RouterError::DimensionMismatch {
                expected: self.input_dim(),
                found: x.rows(),
            });
        }
        let xt = x.transpose();
        (0..x.cols())
            .into_par_iter()
            .map(|j| self.route(xt.row(j)))
            .collect()
    }

    /// Projection parameters plus `c·k` centroid entries.
    pub fn param_count(&self) -> usize {
        self.projection.param_count() + self.kmeans.centroids.len()
    }

    /// Writes `<stem>.router.json` plus tensor files for the centroids and,
    /// with PCA, the mean and components.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), RouterError> {
        let centroids = format!("{stem}.centroids.spxt");
        write_tensor(&self.kmeans.centroids, dir.join(&centroids))?;
        let (pca, mean, components, variances) = match &self.projection {
            Projection::Identity { .. } => (false, None, None, None),
            Projection::Pca(p) => {
                let mean = format!("{stem}.pca_mean.spxt");
                let comps = format!("{stem}.pca_components.spxt");
                write_tensor(&Matrix::from_rows(&[p.mean.as_slice()]), dir.join(&mean))?;
                write_tensor(&p.components, dir.join(&comps))?;
                (true, Some(mean), Some(comps), Some(p.explained_variances.clone()))
            }
        };
        let manifest = RouterManifest {
            m: self.input_dim(),
            k: self.projection.output_dim(),
            c: self.clusters(),
            pca,
            seed: self.kmeans.seed,
            iterations_run: self.kmeans.iterations_run,
            final_inertia: self.kmeans.final_inertia,
            explained_variances: variances,
            centroids,
            mean,
            components,
        };
        let path = dir.join(format!("{stem}.router.json"));
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(&path, text).map_err(|source| RouterError::Io { path, source })
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, RouterError> {
        let path = dir.join(format!("{stem}.router.json"));
        let text = fs::read_to_string(&path).map_err(|source| RouterError::Io { path, source })?;
        let mf: RouterManifest = serde_json::from_str(&text)?;
        let centroids = read_tensor(dir.join(&mf.centroids))?;
        let projection = match (mf.pca, &mf.mean, &mf.components) {
            (true, Some(mean), Some(comps)) => Projection::Pca(PcaModel {
                mean: read_tensor(dir.join(mean))?.into_vec(),
                components: read_tensor(dir.join(comps))?,
                explained_variances: mf.explained_variances.clone().unwrap_or_default(),
            }),
            _ => Projection::Identity { dim: mf.m },
        };
        if projection.output_dim() != centroids.cols() || projection.input_dim() != mf.m {
            return Err(RouterError::DimensionMismatch {
                expected: projection.output_dim(),
                found: centroids.cols(),
            });
        }
        Ok(Self {
            projection,
            kmeans: KMeansModel {
                centroids,
                seed: mf.seed,
                iterations_run: mf.iterations_run,
                final_inertia: mf.final_inertia,
                inertia_history: Vec::new(),
            },
        })
    }
}

/// On-disk description of a [`Router`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RouterManifest {
    pub m: usize,
    pub k: usize,
    pub c: usize,
    pub pca: bool,
    pub seed: u64,
    pub iterations_run: usize,
    pub final_inertia: f64,
    pub explained_variances: Option<Vec<f64>>,
    pub centroids: String,
    pub mean: Option<String>,
    pub components: Option<String>,
}
