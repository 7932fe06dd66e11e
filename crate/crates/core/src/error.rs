use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in input to {op}")]
    NonFinite { op: &'static str },

    #[error("log argument {value:e} below guard threshold")]
    LogDomain { value: f64 },

    #[error("degenerate representation: norm {norm:e} too small to normalize")]
    Degenerate { norm: f64 },

    #[error("input to {op} is not unit-norm (norm {norm})")]
    NotUnitNorm { op: &'static str, norm: f64 },

    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarBackward { shape: Vec<usize> },

    #[error("backward already ran on this graph")]
    BackwardTwice,

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("token id {id} out of range (vocab {vocab}) at row {row}, position {pos}")]
    TokenOutOfRange { row: usize, pos: usize, id: usize, vocab: usize },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("model head mismatch: {0}")]
    HeadMismatch(&'static str),

    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged: non-finite loss in {phase} at step {step}")]
    Diverged { phase: &'static str, step: usize },

    #[error("checkpoint: bad magic header")]
    BadMagic,

    #[error("checkpoint: unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint: truncated file ({0})")]
    Truncated(&'static str),

    #[error("checkpoint: payload checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("checkpoint: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig { field: field.into(), reason: reason.into() }
    }
}
