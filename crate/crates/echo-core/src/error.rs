use alloc::string::String;
use core::fmt;

/// Error type shared by every module in the crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Dimension mismatch between operands; carries both shapes.
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    /// Input outside an operation's mathematical domain (empty softmax, ...).
    Domain(String),
    /// Malformed data, with the offending position when known.
    Data {
        msg: String,
        position: Option<usize>,
    },
    /// Invalid task or experiment specification.
    Spec(String),
    /// Invalid model configuration (e.g. attention diagnostic without attention).
    Config(String),
    /// A caller broke an API contract (non-scalar loss, unmarked hidden states, ...).
    Contract(String),
    /// Expression parse failure with byte position.
    Parse { msg: String, position: usize },
    /// Numeric failure during training, with epoch index when known.
    Training { msg: String, epoch: Option<usize> },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => write!(
                f,
                "shape mismatch in {op}: {}x{} vs {}x{}",
                lhs.0, lhs.1, rhs.0, rhs.1
            ),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Data { msg, position } => match position {
                Some(p) => write!(f, "data error at position {p}: {msg}"),
                None => write!(f, "data error: {msg}"),
            },
            Error::Spec(msg) => write!(f, "spec error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Parse { msg, position } => {
                write!(f, "parse error at position {position}: {msg}")
            }
            Error::Training { msg, epoch } => match epoch {
                Some(e) => write!(f, "training error at epoch {e}: {msg}"),
                None => write!(f, "training error: {msg}"),
            },
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
