use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or parameters that do not fit together (dimension mismatch,
    /// policy/model layer-count mismatch, out-of-range config values).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite input: {0}")]
    NumericInput(String),

    #[error("invalid selection: {0}")]
    InvalidSelection(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Brute-force enumeration refused because the layer count exceeds the guard.
    #[error("enumeration guard: {layers} layers exceeds the limit of {limit}")]
    EnumerationLimit { layers: usize, limit: usize },

    #[error("unsupported {kind} format version {found} (expected major {expected})")]
    UnsupportedVersion {
        kind: &'static str,
        found: String,
        expected: u32,
    },

    #[error("malformed {kind} file: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
