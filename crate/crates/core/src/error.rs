//! Error type shared by every module of the engine.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing dataset file: {0}")]
    MissingFile(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed line {line} in {path}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{entity} id {id} out of range (declared count {count})")]
    IdOutOfRange {
        entity: &'static str,
        id: usize,
        count: usize,
    },

    #[error("bundle {0} appears in user_bundle but has no entries in bundle_item")]
    InteractedBundleWithoutItems(usize),

    #[error("bundle {0} has no items; item-view pooling is undefined")]
    EmptyBundle(usize),

    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    InvalidRatios((f64, f64, f64)),

    #[error("noise_rate must lie in [0, 1], got {0}")]
    InvalidNoiseRate(f64),

    #[error("blocks ({blocks}) must divide users ({users}), bundles ({bundles}), and items ({items})")]
    BlocksDoNotDivide {
        blocks: usize,
        users: usize,
        bundles: usize,
        items: usize,
    },

    #[error("dropout ratio must lie in [0, 1), got {0}")]
    InvalidDropoutRatio(f64),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("{entity} row {id} has zero norm; cosine similarity is undefined")]
    ZeroNormRow { entity: &'static str, id: usize },

    #[error("contrastive batch needs at least 2 distinct entities, got {0}")]
    ContrastiveBatchTooSmall(usize),

    #[error("user {0} interacts with every bundle; negative sampling cannot terminate")]
    NoNegativeCandidates(usize),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("non-finite gradient in {table} table at row {row}")]
    NonFiniteGradient { table: &'static str, row: usize },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint dimensions ({0}) do not match dataset ({1})")]
    DimensionMismatch(String, String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
