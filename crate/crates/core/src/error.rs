use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand extents do not fit the operation.
    Shape { op: &'static str, detail: String },
    /// A configuration value is out of its valid domain.
    Config(String),
    /// A NaN or infinity showed up where a finite value is required.
    Numeric(String),
    /// Similarity alignment has no unique solution for the given points.
    Alignment(String),
    /// A sequence record breaks one of its invariants.
    Validation { record: String, reason: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Config(_) => "config",
            Error::Numeric(_) => "numeric",
            Error::Alignment(_) => "alignment",
            Error::Validation { .. } => "validation",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: dimension error: {detail}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Alignment(msg) => write!(f, "alignment error: {msg}"),
            Error::Validation { record, reason } => {
                write!(f, "record `{record}` failed validation: {reason}")
            }
        }
    }
}

impl core::error::Error for Error {}
