use thiserror::Error;

/// Errors raised while decoding a weight file.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("bad magic {found:?} at offset 0 (expected \"PMPD\")")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {found} at offset 4 (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("truncated input at offset {offset} while reading {what}{}", tensor_suffix(.tensor))]
    Truncated {
        offset: usize,
        what: &'static str,
        tensor: Option<String>,
    },
    #[error("invalid metadata at offset {offset}: {reason}")]
    Metadata { offset: usize, reason: String },
    #[error("tensor `{tensor}` at offset {offset}: {reason}")]
    Tensor {
        offset: usize,
        tensor: String,
        reason: String,
    },
    #[error("{extra} trailing bytes after last tensor at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
}

fn tensor_suffix(tensor: &Option<String>) -> String {
    match tensor {
        Some(name) => format!(" of tensor `{name}`"),
        None => String::new(),
    }
}

#[derive(Debug, Error)]
pub enum Error {
    /// Out-of-range precision, bad dimensions, malformed hyper-parameters.
    #[error("configuration error: {0}")]
    Config(String),
    /// Bad caller input: non-finite weights, unknown tokens, empty corpora.
    #[error("input error: {0}")]
    Input(String),
    #[error("length error: {0}")]
    Length(String),
    /// A component broke an invariant it promised to uphold.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("arithmetic overflow: {0}")]
    Overflow(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("i/o error: {0}")]
    Io(std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Overflow(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
