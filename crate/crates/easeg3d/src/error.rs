use std::path::PathBuf;

/// Crate-wide error type. Variants carry enough context to name the offending
/// field, path, or dimension in diagnostics.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("byte-count mismatch in {path}: header declares {declared} values, payload holds {actual}")]
    ByteCountMismatch {
        path: PathBuf,
        declared: usize,
        actual: usize,
    },

    #[error("degenerate intensity distribution: volume has fewer than two distinct values")]
    DegenerateIntensity,

    #[error("shape mismatch{}: expected {expected:?}, got {actual:?}", ctx_suffix(.context))]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("{axis} {len} not divisible by {denom}")]
    NotDivisible {
        axis: &'static str,
        len: usize,
        denom: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("undefined overlap: both masks are empty")]
    BothMasksEmpty,

    #[error("Hausdorff undefined for empty set ({which})")]
    EmptyPointSet { which: &'static str },

    #[error("empty denominator mask ({which})")]
    EmptyDenominator { which: &'static str },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("weight archive {path}: {reason}")]
    WeightArchive { path: PathBuf, reason: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("training aborted at epoch {epoch}, step {step}: {reason}")]
    TrainingAborted {
        epoch: usize,
        step: usize,
        reason: String,
    },

    #[error("config: {0}")]
    Config(String),
}

fn ctx_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
