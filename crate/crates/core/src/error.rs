use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("edge ({src}, {dst}) references a node outside [0, {num_nodes})")]
    NodeOutOfRange {
        src: usize,
        dst: usize,
        num_nodes: usize,
    },

    #[error("homophily is undefined for node {node}: it has no neighbors")]
    UndefinedHomophily { node: usize },

    #[error("homophily is undefined: every node is isolated")]
    AllNodesIsolated,

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("label {label} at row {row} is outside [0, {num_classes})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("regime mismatch: {0}")]
    RegimeMismatch(String),

    #[error("class means coincide; the separating direction is undefined")]
    DegenerateSeparation,

    #[error("backward called without a cached forward pass")]
    MissingForward,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("run split={split} seed={seed} failed: {source}")]
    RunFailed {
        split: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
