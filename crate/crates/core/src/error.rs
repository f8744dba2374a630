use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate box: w={w}, h={h}")]
    DegenerateBox { w: f64, h: f64 },

    #[error("could not place {requested} objects within the overlap limit after {attempts} attempts")]
    Placement { requested: usize, attempts: usize },

    #[error("no transform retained any object after {attempts} attempts (pair {pair_id})")]
    TransformExhausted { pair_id: String, attempts: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invariant violated in pair {pair_id}: {msg}")]
    Invariant { pair_id: String, msg: String },

    #[error("split does not match pairs: {0}")]
    SplitMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("missing detections for {0:?}")]
    MissingDetections(Vec<(String, usize)>),

    #[error("non-finite loss term {term} at step {step}")]
    NonFinite { term: &'static str, step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown pair id {0}")]
    UnknownPair(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
