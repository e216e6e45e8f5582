use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

use spx_core::evalreport::EvalError;
use spx_core::expansion::ExpansionError;
use spx_core::metrics::MetricsError;
use spx_core::numerics::{CodecError, NumericsError};
use spx_core::pruner::PrunerError;
use spx_core::router::RouterError;
use spx_core::synth::SynthError;

use crate::bench::BenchError;

/// Exit status of a failed run; each class has its own code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Usage,
    Config,
    Io,
    Compute,
    Allocation,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Config => 3,
            ErrorKind::Io => 4,
            ErrorKind::Compute => 5,
            ErrorKind::Allocation => 6,
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0}")]
    Compute(String),
    #[error("{0}")]
    Allocation(String),
}

impl CliError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            CliError::Usage(_) => ErrorKind::Usage,
            CliError::Config(_) => ErrorKind::Config,
            CliError::Io { .. } => ErrorKind::Io,
            CliError::Compute(_) => ErrorKind::Compute,
            CliError::Allocation(_) => ErrorKind::Allocation,
        }
    }

    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// The single-line JSON written to stderr on failure.
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "exit_code": self.kind().exit_code(),
            "message": self.to_string(),
        })
        .to_string()
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::Io { path, source } => CliError::io(path, source),
            e => CliError::Compute(e.to_string()),
        }
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        CliError::Compute(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::InvalidFraction(_) => CliError::Config(e.to_string()),
            e => CliError::Compute(e.to_string()),
        }
    }
}

impl From<PrunerError> for CliError {
    fn from(e: PrunerError) -> Self {
        match e {
            PrunerError::Io { path, source } => CliError::io(path, source),
            PrunerError::Codec(c) => c.into(),
            PrunerError::InvalidSpec(_) | PrunerError::GroupMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            e => CliError::Compute(e.to_string()),
        }
    }
}

impl From<RouterError> for CliError {
    fn from(e: RouterError) -> Self {
        match e {
            RouterError::Io { path, source } => CliError::io(path, source),
            RouterError::Codec(c) => c.into(),
            e => CliError::Compute(e.to_string()),
        }
    }
}

impl From<ExpansionError> for CliError {
    fn from(e: ExpansionError) -> Self {
        match e {
            ExpansionError::Io { path, source } => CliError::io(path, source),
            ExpansionError::Codec(c) => c.into(),
            ExpansionError::Pruner(p) => p.into(),
            ExpansionError::Router(r) => r.into(),
            ExpansionError::Manifest(_) | ExpansionError::Json(_) => {
                CliError::Config(e.to_string())
            }
            e => CliError::Compute(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidSpec(_) => CliError::Config(e.to_string()),
            SynthError::Expansion(x) => x.into(),
            e => CliError::Compute(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { path, source } => CliError::io(path, source),
            EvalError::InvalidConfig(_) => CliError::Config(e.to_string()),
            EvalError::Expansion(x) => x.into(),
            EvalError::Pruner(p) => p.into(),
            e => CliError::Compute(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Allocation { .. } => CliError::Allocation(e.to_string()),
            BenchError::InvalidConfig(_) => CliError::Config(e.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_distinct() {
        let kinds = [
            ErrorKind::Usage,
            ErrorKind::Config,
            ErrorKind::Io,
            ErrorKind::Compute,
            ErrorKind::Allocation,
        ];
        let mut codes: Vec<i32> = kinds.iter().map(|k| k.exit_code()).collect();
        codes.dedup();
        assert_eq!(codes.len(), kinds.len());
        assert!(codes.iter().all(|&c| c != 0));
    }

    #[test]
    fn json_shape() {
        let e = CliError::Config("bad sparsity".into());
        let v: serde_json::Value = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(v["error"], "config");
        assert_eq!(v["exit_code"], 3);
    }
}
