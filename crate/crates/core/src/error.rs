use thiserror::Error;

/// Crate-wide error type. Every fallible operation returns one of these
/// variants so callers (and the CLI) can map failures to distinct classes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid dimensions for {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("non-finite value rejected at construction (index {index})")]
    NonFinite { index: usize },

    #[error("rank-deficient input: column {column} pivot {pivot:e} below threshold {threshold:e}")]
    DegenerateBasis {
        column: usize,
        pivot: f64,
        threshold: f64,
    },

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("numerical failure in replica {replica} stage {stage}: {msg}")]
    NumericalFailure {
        replica: usize,
        stage: usize,
        msg: String,
    },

    #[error("target id {id} out of range (vocab {vocab})")]
    TargetOutOfRange { id: u32, vocab: usize },

    #[error("sparse index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("synchronization error: {0}")]
    Sync(String),

    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
