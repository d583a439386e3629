use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RotError {
    #[error("quaternion with rho = {rho} is at the MRP south pole; use the other antipode")]
    SouthPoleSingularity { rho: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("edge {index} ({i} -> {j}) is invalid for an environment with {n_nodes} nodes")]
    InvalidEdge {
        index: usize,
        i: usize,
        j: usize,
        n_nodes: usize,
    },
    #[error("ground truth has {got} rotations, expected {expected}")]
    GroundTruthLength { expected: usize, got: usize },
    #[error("neighborhood graph has {components} connected components, expected 1")]
    Disconnected { components: usize },
    #[error("neighborhood graph still disconnected after {attempts} generation attempts")]
    ConnectivityFailure { attempts: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("learning rate must be positive and finite, got {0}")]
    Gamma(f64),
    #[error("maximum MRP step must be positive, got {0}")]
    Eta(f64),
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error("checkpoint interval must be at least 1")]
    CheckpointEvery,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("gauge alignment is degenerate (accumulated matrix has rank < 2)")]
    DegenerateAlignment,
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: checksum mismatch (stored {stored}, computed {computed})")]
    ChecksumMismatch {
        path: PathBuf,
        stored: String,
        computed: String,
    },
    #[error("{path}: no valid edges survived import")]
    EmptyGraph { path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Env {
        path: PathBuf,
        #[source]
        source: EnvError,
    },
}

impl IoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, reason: impl Into<String>) -> Self {
        Self::Parse {
            path: path.into(),
            line,
            reason: reason.into(),
        }
    }
}
