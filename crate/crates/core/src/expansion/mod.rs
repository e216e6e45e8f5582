//! Sparse Expansion: per-cluster sparse experts behind an input router,
//! built layer by layer over a stack of FFN blocks.

mod expert;
mod io;
mod model;
mod pipeline;

use std::path::PathBuf;

use thiserror::Error;

use crate::metrics::MetricsError;
use crate::numerics::{CodecError, NumericsError};
use crate::pruner::PrunerError;
use crate::router::RouterError;

pub use expert::{
    build_experts, expand_layer, ExpertBuildConfig, ExpertLayer, ExpertProvenance,
    DEFAULT_POOL_ALPHA,
};
pub use io::{
    load_dense_model, load_expanded_model, save_dense_model, save_expanded_model, ModelManifest,
};
pub use model::{gelu, FfnBlock, LayerId, LayerKind, Linear, ToyModel};
pub use pipeline::{
    count_dense_params, count_params, expand_model, layer_seed, prune_model_sequential,
    ExpandedBlock, ExpandedModel, ExpansionConfig, LayerPruner, LayerScope, ParamCount,
    RowSelector, SequentialPruneOptions, DEFAULT_CLUSTERS,
};

#[derive(Debug, Error)]
pub enum ExpansionError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{samples} calibration inputs cannot fill {clusters} clusters")]
    TooFewCalibration { samples: usize, clusters: usize },
    #[error("non-finite activations after layer {layer}")]
    NonFinite { layer: LayerId },
    #[error(transparent)]
    Pruner(#[from] PrunerError),
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
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
    #[error("bad model manifest: {0}")]
    Manifest(String),
}
