use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch at {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value in {context}")]
    NonFiniteInput { context: String },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("unknown leaf `{0}` (not fed and not a constant)")]
    MissingFeed(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("model build failed at layer {layer}: {reason}")]
    ModelBuild { layer: String, reason: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("label inference failed: {0}")]
    LabelInference(String),

    #[error("bundles misaligned: {0}")]
    BundleMismatch(String),

    #[error("no submissions to aggregate")]
    EmptySubmissions,

    #[error("empty data shard for client {0}")]
    EmptyShard(usize),

    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),

    #[error("partition failed: {0}")]
    Partition(String),

    #[error("dataset format error in {path}: {reason}")]
    DatasetFormat { path: String, reason: String },

    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("bundle serialization error: {0}")]
    BundleFormat(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
