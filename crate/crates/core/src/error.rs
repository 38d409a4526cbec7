use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LevitError>;

#[derive(Debug, Error)]
pub enum LevitError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch { op: &'static str, expected: String, got: String },

    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("unknown model `{name}`; available: {}", alternatives.join(", "))]
    UnknownPreset { name: String, alternatives: Vec<String> },

    #[error("pixel ({x}, {y}) lies outside the {height}x{width} grid")]
    OutOfGrid { x: usize, y: usize, height: usize, width: usize },

    #[error("backward requires a single-element output, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),

    #[error("drop path probability must lie in [0, 1), got {0}")]
    InvalidProbability(f64),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("operation requires an eval-mode model")]
    TrainMode,

    #[error("archive: bad magic bytes")]
    BadMagic,

    #[error("archive: unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("archive: truncated while reading {0}")]
    Truncated(&'static str),

    #[error("archive: malformed {what}: {reason}")]
    Malformed { what: &'static str, reason: String },

    #[error("archive: duplicate entry `{0}`")]
    DuplicateEntry(String),

    #[error("archive: missing entry `{0}`")]
    MissingEntry(String),

    #[error("archive: unexpected entry `{0}`")]
    UnexpectedEntry(String),

    #[error("archive: entry `{name}` has shape {got:?}, model expects {expected:?}")]
    EntryShape { name: String, expected: Vec<usize>, got: Vec<usize> },

    #[error("archive: entry `{name}` stored as {got}, model uses {expected}")]
    EntryDType { name: String, expected: &'static str, got: &'static str },

    #[error("spec parse error: {0}")]
    SpecParse(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl LevitError {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        LevitError::ShapeMismatch { op, expected: expected.to_string(), got: got.to_string() }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        LevitError::Config { field: field.into(), reason: reason.into() }
    }
}
