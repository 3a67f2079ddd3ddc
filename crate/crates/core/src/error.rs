//! Crate-wide error type with a stable CLI exit-code mapping.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("size mismatch in {path}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("bad value: {0}")]
    BadValue(String),

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("zero vector at row {row} of {side}: cosine distance undefined")]
    ZeroVector { side: &'static str, row: usize },

    #[error("all queries skipped: no query has a valid match under the filter protocol")]
    AllQueriesSkipped,

    #[error("bad parameters: {0}")]
    BadParams(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bad label: {0}")]
    BadLabel(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("not enough identities: {0}")]
    NotEnoughIdentities(String),

    #[error("empty feature map: {0}")]
    EmptyMap(String),
}

impl Error {
    /// Exit code used by the CLI for this error class.
    ///
    /// 2 usage / bad parameters, 3 missing file or i/o failure,
    /// 4 malformed on-disk data, 5 invalid values or shapes,
    /// 6 evaluation produced no usable queries.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::BadParams(_) | Error::NotEnoughIdentities(_) => 2,
            Error::MissingFile(_) | Error::IoFailure { .. } => 3,
            Error::MalformedManifest(_) | Error::SizeMismatch { .. } => 4,
            Error::BadValue(_)
            | Error::DimMismatch(_)
            | Error::ZeroVector { .. }
            | Error::ShapeMismatch(_)
            | Error::BadLabel(_)
            | Error::DegenerateBatch(_)
            | Error::EmptyMap(_) => 5,
            Error::AllQueriesSkipped => 6,
        }
    }
}
