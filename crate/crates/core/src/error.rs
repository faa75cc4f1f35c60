use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),

    #[error("branch depth {m} outside 1..={layers}")]
    InvalidBranchDepth { m: usize, layers: usize },

    #[error("invalid training stage {0} (expected 1 or 2)")]
    InvalidStage(u8),

    #[error("mask kind mismatch: expected {expected}, got {actual}")]
    MaskKindMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("cache misuse: {0}")]
    CacheMisuse(String),

    #[error("decode step spans multiple diagonals: {0:?}")]
    DiagonalSpan(Vec<usize>),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("parameter name set mismatch: {0}")]
    NameSetMismatch(String),

    #[error("checkpoint/config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("unknown class id {0}")]
    UnknownClass(usize),

    #[error("palette has {palette} colors but vocabulary needs {needed}")]
    PaletteTooSmall { palette: usize, needed: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}
