use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised while loading or validating a run configuration.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("type mismatch for `{key}`: expected {expected}, found {found}")]
    TypeMismatch {
        key: String,
        expected: String,
        found: String,
    },
    #[error("malformed override `{0}` (expected KEY=VALUE)")]
    MalformedOverride(String),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("record {index}: expected {expected} fields, found {found}")]
    SchemaMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("record {index}: label `{value}` is not 0 or 1")]
    InvalidLabel { index: usize, value: String },
    #[error("feature id {id} out of range for field {field} (vocabulary size {size})")]
    IdOutOfRange { field: usize, id: u32, size: usize },
    #[error("code index {index} out of range for sub-codebook {sub} (K = {k})")]
    CodeOutOfRange { sub: usize, index: u32, k: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("AUC undefined: labels contain a single class")]
    AucUndefined,
    #[error("bad magic: expected `{expected}`")]
    BadMagic { expected: &'static str },
    #[error("truncated {what} file")]
    Truncated { what: &'static str },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported {what} format version `{found}`")]
    VersionMismatch { what: &'static str, found: String },
    #[error("vocabulary/codebook mismatch on field `{field}`: {detail}")]
    VocabularyMismatch { field: String, detail: String },
    #[error("non-finite loss at batch {batch} (epoch {epoch}); parameter L2 norm {param_norm:.6e}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        param_norm: f64,
    },
    #[error("non-finite quantizer loss at epoch {epoch}, batch {batch}: recon={recon} reg={reg} con={con}")]
    NonFiniteQuantizerLoss {
        epoch: usize,
        batch: usize,
        recon: f64,
        reg: f64,
        con: f64,
    },
    #[error("missing input artifact `{}`", .0.display())]
    MissingArtifact(PathBuf),
    #[error("variant {variant} failed: {source}")]
    VariantFailed {
        variant: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Truncated reads surface as `UnexpectedEof` from the byte readers.
    pub(crate) fn from_read(err: io::Error, what: &'static str) -> Self {
        if err.kind() == io::ErrorKind::UnexpectedEof {
            Error::Truncated { what }
        } else {
            Error::Io(err)
        }
    }
}
