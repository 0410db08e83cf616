use std::path::PathBuf;

/// Unified error type for the whole crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An annotation record violates the label-model invariants.
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    /// A caller broke an API precondition (shape mismatch, stale cache, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The corpus offers nothing to sample from.
    #[error("corpus cannot be sampled: {0}")]
    UnsampleableCorpus(String),

    /// Synthetic data generation could not complete.
    #[error("generation failed: {0}")]
    Generation(String),

    /// An identifier token contains characters outside [a-z0-9_] or is empty.
    #[error("invalid name token: {0}")]
    Naming(String),

    /// A binary file is malformed; `offset` points at the offending byte.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// A manifest line could not be parsed or is inconsistent.
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    /// A volume referenced by the manifest failed validation on load.
    #[error("cannot load image '{image_id}': {msg}")]
    CorpusLoad { image_id: String, msg: String },

    /// NaN or infinity appeared where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A config file or `--set` override is malformed. `line` is 0 when the
    /// value did not come from a file.
    #[error("config error (line {line}): {msg}")]
    Config { line: usize, msg: String },

    /// An evaluation request referenced unknown data.
    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
