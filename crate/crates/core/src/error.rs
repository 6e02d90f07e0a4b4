use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("topology error: {0}")]
    Topology(String),
    #[error("index {index} out of range (len {len})")]
    Range { index: usize, len: usize },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("batch norm in train mode needs a batch larger than 1")]
    BatchTooSmall,
    #[error("non-finite loss at epoch {epoch}, step {step}; diagnostics written to {}", dump.display())]
    NonFinite {
        epoch: usize,
        step: usize,
        dump: PathBuf,
    },
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("tensor file: {0}")]
    TensorFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// An I/O error tagged with the path it concerns.
    pub fn io_at(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::File {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
