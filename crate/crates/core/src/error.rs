use std::path::PathBuf;

/// Errors produced anywhere in the pruning toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid sparsity pattern: {0}")]
    Pattern(String),

    #[error("channel count {channels} is not divisible by group size {group}")]
    Divisibility { channels: usize, group: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("packed weight invariant violated: {0}")]
    PackInvariant(String),

    #[error("layer {layer_id}: {source}")]
    Layer {
        layer_id: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_layer(self, layer_id: &str) -> Self {
        Error::Layer {
            layer_id: layer_id.to_string(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad inputs rather than internal failures.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::PackInvariant(_) => false,
            Error::Layer { source, .. } => source.is_validation(),
            _ => true,
        }
    }
}
