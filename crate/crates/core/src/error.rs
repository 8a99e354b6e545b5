use std::fmt;
use std::io;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the pipeline.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible; both shapes are named.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
        detail: String,
    },
    /// A configuration value or combination is invalid.
    Config(String),
    /// Input data violates a documented precondition (e.g. non-binary mask).
    Validation(String),
    /// A forward operation produced a NaN or infinity.
    NonFinite { op: &'static str },
    /// An on-disk container is malformed; names the offending field.
    Format { field: &'static str, detail: String },
    /// Clip generation could not place objects on the canvas.
    Generation(String),
    /// The finite-difference oracle hit a non-finite evaluation.
    Oracle { param: String },
    Io { path: String, source: io::Error },
    Json(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs, detail } => {
                write!(f, "shape error in {op}: lhs {lhs:?} vs rhs {rhs:?}: {detail}")
            }
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            Error::Format { field, detail } => write!(f, "format error in field `{field}`: {detail}"),
            Error::Generation(msg) => write!(f, "generation error: {msg}"),
            Error::Oracle { param } => {
                write!(f, "finite-difference oracle failure: non-finite objective at parameter `{param}`")
            }
            Error::Io { path, source } => write!(f, "io error at {path}: {source}"),
            Error::Json(msg) => write!(f, "json error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<String>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}
