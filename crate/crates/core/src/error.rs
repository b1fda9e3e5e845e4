use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible.
    Dimension(String),
    /// A softmax row or pooled item had no unmasked entries.
    DegenerateRow { row: usize },
    /// Invalid configuration or hyperparameters.
    Config(String),
    /// A caller broke an operation's contract.
    Contract(String),
    /// Malformed dataset contents.
    Data(String),
    /// Truncated or unreadable ingestion input.
    Ingestion { offset: u64, reason: String },
    /// An operation produced NaN or infinity.
    NonFinite(&'static str),
    /// Matched-capacity protocol violated; lists the mismatched fields.
    Fairness(alloc::vec::Vec<String>),
    /// Broken internal invariant.
    Internal(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::DegenerateRow { row } => write!(f, "degenerate row {row}: every entry is masked"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Ingestion { offset, reason } => {
                write!(f, "ingestion error at byte {offset}: {reason}")
            }
            Error::NonFinite(op) => write!(f, "non-finite value produced by {op}"),
            Error::Fairness(fields) => {
                write!(f, "fairness error: mismatched fields [{}]", fields.join(", "))
            }
            Error::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
