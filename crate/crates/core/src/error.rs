//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit codes: configuration
//! problems, data/format problems, and numeric failures.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// A configuration value is unusable (zero word cap, dropout >= 1, ...).
    InvalidConfig(String),
    /// Input data is unusable (empty text, estimator/model mismatch, ...).
    InvalidInput(String),
    /// Malformed corpus line.
    Parse { line: usize, msg: String },
    /// File IO failure with the offending path.
    Io { path: String, source: std::io::Error },
    /// A tag appears in a sentence but not in the vocabulary.
    UnknownTag(String),
    /// Corpus too small to form a single training block.
    InsufficientData { required: usize, available: usize },
    /// Tensor shapes do not line up; both shapes are named.
    Dimension { expected: String, found: String, op: String },
    /// Symbol or position index out of range.
    IndexOutOfRange { index: usize, len: usize, what: String },
    /// Model file carries an unsupported format version.
    VersionMismatch { found: String },
    /// Model file bytes do not match the stored checksum (or are truncated).
    ChecksumMismatch(String),
    /// Model file header disagrees with the stored arrays.
    ShapeMismatch(String),
    /// Any other model-file format violation.
    ModelFormat(String),
    /// Non-finite value where a finite one is required.
    Numeric(String),
    /// Every particle received zero likelihood at a word.
    FilterCollapse { word_index: usize },
    /// The model assigns zero mass to every tag at a tag slot.
    DegenerateSlot { word_index: usize },
    /// Enumeration would exceed the configured budget.
    BudgetExceeded { required: usize, allowed: usize },
    /// An internal invariant was violated (a bug, not a user error).
    Internal(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::Parse { line, msg } => write!(f, "parse error at line {line}: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
            Error::UnknownTag(tag) => write!(f, "unknown tag: {tag:?}"),
            Error::InsufficientData { required, available } => write!(
                f,
                "insufficient data: need at least {required} symbols, corpus has {available}"
            ),
            Error::Dimension { expected, found, op } => {
                write!(f, "dimension mismatch in {op}: expected {expected}, found {found}")
            }
            Error::IndexOutOfRange { index, len, what } => {
                write!(f, "{what} index {index} out of range (len {len})")
            }
            Error::VersionMismatch { found } => {
                write!(f, "unsupported model file version: {found:?}")
            }
            Error::ChecksumMismatch(msg) => write!(f, "model file checksum failure: {msg}"),
            Error::ShapeMismatch(msg) => write!(f, "model file shape error: {msg}"),
            Error::ModelFormat(msg) => write!(f, "model file format error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::FilterCollapse { word_index } => {
                write!(f, "particle filter collapse: all weights zero at word {word_index}")
            }
            Error::DegenerateSlot { word_index } => {
                write!(f, "degenerate tag slot: zero tag mass at word {word_index}")
            }
            Error::BudgetExceeded { required, allowed } => {
                write!(f, "enumeration budget exceeded: {required} paths, allowed {allowed}")
            }
            Error::Internal(msg) => write!(f, "internal invariant violated: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
