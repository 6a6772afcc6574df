use std::fmt;

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 1).
    Usage(String),
    /// Unreadable, malformed, or mismatched input data (exit 2).
    Data(String),
    /// Non-finite values or failed numeric checks (exit 3).
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<rnnsearch::Error> for CliError {
    fn from(e: rnnsearch::Error) -> Self {
        use rnnsearch::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidArgument(_) => CliError::Usage(msg),
            E::Data(_) | E::Checkpoint(_) | E::Io(_) => CliError::Data(msg),
            E::NonFinite(_) | E::NonFiniteLoss { .. } | E::Shape { .. } => CliError::Numeric(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Wraps an I/O failure with the path involved.
pub fn io_error(path: &std::path::Path, e: impl fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
