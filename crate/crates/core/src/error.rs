use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensors, models, attacks, and file formats.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An API contract was violated by the caller.
    Contract(String),
    /// An object was used in a state that does not permit the operation.
    State(String),
    /// A configuration value is out of range or inconsistent.
    Config(String),
    /// Bad input data (labels, dataset sizes, empty slices).
    Input(String),
    /// A computation produced NaN/Inf where finite values are required.
    Numeric(String),
    /// Training diverged; the message echoes the offending configuration.
    Training(String),
    /// A file does not look like the expected format.
    Format(String),
    /// A checkpoint was written by a newer format revision than this reader.
    Version { found: u32, supported: u32 },
    /// A container's manifest and payload disagree.
    Corrupt(String),
    /// A rate over an empty filtered set is undefined.
    UndefinedRate(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dimension { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Self::Contract(msg) => write!(f, "contract violation: {msg}"),
            Self::State(msg) => write!(f, "invalid state: {msg}"),
            Self::Config(msg) => write!(f, "invalid config: {msg}"),
            Self::Input(msg) => write!(f, "invalid input: {msg}"),
            Self::Numeric(msg) => write!(f, "numeric failure: {msg}"),
            Self::Training(msg) => write!(f, "training failure: {msg}"),
            Self::Format(msg) => write!(f, "format error: {msg}"),
            Self::Version { found, supported } => {
                write!(f, "format version {found} is newer than supported {supported}")
            }
            Self::Corrupt(msg) => write!(f, "corrupt container: {msg}"),
            Self::UndefinedRate(msg) => write!(f, "undefined rate: {msg}"),
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Self::Json(e)
    }
}
