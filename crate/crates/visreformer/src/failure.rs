//! Process exit codes and the error kinds that select them.

use std::fmt;

use visreformer_core::Error as CoreError;

/// Exit status of a command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    InvariantFailure = 1,
    Usage = 2,
    Io = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

/// A bad command line, flag value or configuration document.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "usage error: {}", self.0)
    }
}

impl std::error::Error for UsageError {}

/// One or more checked invariants did not hold.
#[derive(Debug)]
pub struct InvariantFailure(pub Vec<String>);

impl fmt::Display for InvariantFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invariant failure: {}", self.0.join(", "))
    }
}

impl std::error::Error for InvariantFailure {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Maps an error chain to an exit status. The first recognized cause wins;
/// anything unrecognized counts as an invariant failure.
pub fn classify(err: &anyhow::Error) -> ExitStatus {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return ExitStatus::Usage;
        }
        if cause.is::<InvariantFailure>() {
            return ExitStatus::InvariantFailure;
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() || cause.is::<serde_json::Error>() {
            return ExitStatus::Io;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Ingestion { .. } | CoreError::Data(_) => ExitStatus::Io,
                CoreError::Config(_) | CoreError::Fairness(_) => ExitStatus::Usage,
                _ => ExitStatus::InvariantFailure,
            };
        }
    }
    ExitStatus::InvariantFailure
}
