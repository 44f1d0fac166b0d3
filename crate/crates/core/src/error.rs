use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("PLY header line {line}: {message} (`{text}`)")]
    Header {
        line: usize,
        text: String,
        message: String,
    },

    #[error("PLY data error at vertex {vertex}: {message}")]
    Data { vertex: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("need at least {needed} points, got {available}")]
    InsufficientPoints { needed: usize, available: usize },

    #[error("need at least {needed} distinct positions, got {available}")]
    InsufficientDistinctPoints { needed: usize, available: usize },

    #[error("point id {0} is not part of the cloud")]
    Integrity(u32),

    #[error("cloud has no crack points to build a negative band around")]
    EmptySelection,

    #[error("crack split needs at least 3 crack instances, found {0}")]
    Split(usize),

    #[error("degenerate class balance: {positives} positives, {negatives} negatives")]
    DegenerateClasses { positives: usize, negatives: usize },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("model file: {0}")]
    Model(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
