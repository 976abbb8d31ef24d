//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected rank-{expected} tensor, got shape {shape:?}")]
    BadRank {
        op: String,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: String, msg: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error(
        "gradient parameter sets differ: left-only {left_only:?}, right-only {right_only:?}"
    )]
    ParamSetMismatch {
        left_only: Vec<String>,
        right_only: Vec<String>,
    },

    #[error("policy space has {cardinality} outcomes, exceeding the cap of {cap}")]
    PolicySpaceTooLarge { cardinality: u128, cap: u128 },

    #[error("non-finite value detected in {tensor} at {context}")]
    NonFinite { tensor: String, context: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dataset file {path} is truncated: expected a multiple of {record} bytes, trailing data starts at byte offset {offset}")]
    TruncatedBatchFile {
        path: String,
        record: usize,
        offset: u64,
    },

    #[error("label {label} out of range for {classes} classes in {path} at record {record}")]
    LabelOutOfRange {
        label: u8,
        classes: usize,
        path: String,
        record: usize,
    },

    #[error("unsupported schema version {found} for {kind} (supported: {supported})")]
    SchemaVersion {
        kind: String,
        found: u32,
        supported: u32,
    },

    #[error("artifact {path} is not a {expected} file (found kind {found:?})")]
    WrongArtifactKind {
        path: String,
        expected: String,
        found: Option<String>,
    },

    #[error("checkpoint {path} is malformed: {msg}")]
    BadCheckpoint { path: String, msg: String },

    #[error("run directory {0} has no checkpoints to resume from")]
    NothingToResume(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    TomlParse(#[from] toml::de::Error),

    #[error("toml serialization error: {0}")]
    TomlEmit(#[from] toml::ser::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op: op.to_string(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn invalid(op: &str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op: op.to_string(),
            msg: msg.into(),
        }
    }
}
