use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("degenerate feature: row {row} has L2 norm {norm} < 1e-12")]
    DegenerateFeature { row: usize, norm: f64 },

    #[error("class index {index} out of range for {classes} classes (row {row})")]
    ClassIndex {
        index: usize,
        classes: usize,
        row: usize,
    },

    #[error("backward already ran on this graph; rebuild the graph before calling again")]
    BackwardReused,

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("node {0} is not part of this graph")]
    DetachedNode(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in {what} at position {position}: {message}")]
    Parse {
        what: String,
        position: usize,
        message: String,
    },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch} (item indices {items:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        items: Vec<usize>,
    },

    #[error("evaluation protocol is empty: no query retained a valid positive")]
    EmptyProtocol,

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: String, message: String },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
