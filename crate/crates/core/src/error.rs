use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MuseError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MuseError {
    #[error("empty reduction")]
    EmptyReduction,

    #[error("fully masked row (query {row})")]
    FullyMaskedRow { row: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("uncovered query {index}: no partial attends to it")]
    UncoveredQuery { index: usize },

    #[error("more clusters than points ({clusters} > {points})")]
    TooManyClusters { clusters: usize, points: usize },

    #[error("infeasible capacity: {clusters} clusters of cap {cap} cannot hold {points} points")]
    InfeasibleCapacity {
        cap: usize,
        clusters: usize,
        points: usize,
    },

    #[error("empty key cluster {0}")]
    EmptyCluster(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid causal plan: {0}")]
    InvalidPlan(String),

    #[error("reference output has zero norm")]
    ZeroReferenceNorm,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("not a MUSEQKV file")]
    NotQkvFile,

    #[error("unsupported MUSEQKV version {0}")]
    UnsupportedVersion(u32),

    #[error("unknown dtype code {0}")]
    UnknownDtype(u32),

    #[error("dtype mismatch: file holds {found}, requested {requested}")]
    DtypeMismatch {
        found: &'static str,
        requested: &'static str,
    },

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },

    #[error("trailing bytes: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: u64, actual: u64 },

    #[error("non-finite payload entry at scalar index {0}")]
    NonFinitePayload(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("report serialization failed: {0}")]
    Report(String),
}

impl MuseError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Self::ShapeMismatch(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Self::InvalidConfig(msg.into())
    }
}
