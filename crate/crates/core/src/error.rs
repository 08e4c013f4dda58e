use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{kind} id {id} out of range (size {size})")]
    OutOfRange { kind: &'static str, id: u64, size: u64 },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{path}:{line}: class {class:?} declared as its own superclass")]
    SelfSubclass { path: PathBuf, line: usize, class: String },

    #[error("class hierarchy contains a cycle through {0:?}")]
    CyclicHierarchy(String),

    #[error("unknown class {0:?}")]
    UnknownClass(String),

    #[error("requested {requested} partitions but only {available} classes are occupied")]
    TooManyPartitions { requested: usize, available: usize },

    #[error("invalid partition count {k} for {triples} training triples")]
    InvalidPartitionCount { k: usize, triples: usize },

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("selection fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),

    #[error("selection budget rounds down to zero triples")]
    EmptyBudget,

    #[error("class {0:?} has no entities")]
    UnoccupiedClass(String),

    #[error("model {model} needs {expected} embeddings, table holds {found}")]
    DtypeMismatch { model: &'static str, expected: &'static str, found: &'static str },

    #[error("negative sampling scope holds {0} entities; at least 2 are needed")]
    DegenerateScope(usize),

    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),

    #[error("{workers} workers requested for {partitions} partitions")]
    TooManyWorkers { workers: usize, partitions: usize },

    #[error("training diverged at step {0}")]
    DivergedAt(u64),

    #[error("embedding table holds non-finite values")]
    NonFinite,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("corrupt artifact {path}: {message}")]
    Corrupt { path: PathBuf, message: String },

    #[error("test split is empty")]
    EmptyTestSplit,

    #[error("no class has enough labelled entities for typing evaluation")]
    NoTypingClasses,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
