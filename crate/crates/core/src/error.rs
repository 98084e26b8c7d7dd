use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("leaf is not recorded on this tape")]
    MissingLeaf,
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("timestep {t} outside 1..={max}")]
    Step { t: usize, max: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("training diverged at step {step} (loss {loss})")]
    TrainingDiverged { step: usize, loss: f32 },
    #[error("{what} {value} did not reach threshold {threshold}")]
    Underfit { what: &'static str, value: f32, threshold: f32 },
    #[error("non-finite gradient at attack step {step}")]
    Numeric { step: usize },
    #[error("operation requires pixel data: {0}")]
    Mode(String),
    #[error("need at least {needed} samples for {dim}-dimensional features, got {got}")]
    SampleSize { needed: usize, got: usize, dim: usize },
    #[error("k = {k} must be below min(n_real, n_gen) = {limit}")]
    K { k: usize, limit: usize },
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    Magic { found: u32, expected: u32 },
    #[error("truncated input: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("label count {labels} does not match image count {images}")]
    CountMismatch { images: usize, labels: usize },
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("checkpoint hash mismatch")]
    HashMismatch,
    #[error("malformed input: {0}")]
    Format(String),
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
