use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("degenerate embedding: row {row} has L2 norm {norm:e}")]
    DegenerateEmbedding { row: usize, norm: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("insufficient negatives: contrastive batch needs at least 2 pairs, got {0}")]
    InsufficientNegatives(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate task: {0}")]
    DegenerateTask(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("failed to decode image {path}: {detail}")]
    Decode { path: PathBuf, detail: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
