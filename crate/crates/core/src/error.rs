use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("invalid BIOES sequence at position {position}: {msg}")]
    Validation { position: usize, msg: String },

    #[error("invalid BIOES sequence at line {line}: {msg}")]
    CorpusValidation { line: usize, msg: String },

    #[error("unknown tag `{0}`")]
    UnknownTag(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("instance too large: {0}")]
    Size(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {msg}")]
    Divergence { epoch: usize, batch: usize, msg: String },

    #[error("archive error: {0}")]
    Archive(String),

    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, err: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            msg: err.to_string(),
        }
    }
}
