use std::fmt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure while decoding one of the binary file formats.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("truncated payload: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("dimension overflow: dims {dims:?} exceed addressable size")]
    DimOverflow { dims: Vec<u64> },
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error("unsupported rank {0}")]
    BadRank(u8),
    #[error("unsupported version {found}, expected {expected}")]
    Version { found: u16, expected: u16 },
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("image: {0}")]
    Image(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("layout error: {0}")]
    Layout(String),
    #[error("config error in `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("unexpected tensor {0:?}")]
    UnexpectedTensor(String),
    #[error("tensor {name:?} has dims {actual:?}, expected {expected:?}")]
    TensorDims {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("fusion state mismatch: {0}")]
    FusionState(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        expected: impl fmt::Display,
        actual: impl fmt::Display,
    ) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
