use std::fmt;
use std::path::Path;

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// Malformed or invalid configuration.
    Config(String),
    /// The run itself produced non-finite values or could not converge.
    Numeric(String),
    /// `verify-bounds` found a violated bound.
    Acceptance(String),
    /// A required input is missing or unreadable, or an output could not be written.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Acceptance(_) => 4,
            CliError::Io(_) => 5,
        }
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Acceptance(m) => write!(f, "acceptance check failed: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<dcl_core::Error> for CliError {
    fn from(e: dcl_core::Error) -> Self {
        use dcl_core::Error as E;
        match e {
            E::NumericFailure { .. }
            | E::NonFinite(_)
            | E::DegenerateProjection(_)
            | E::MissingClassInLabels { .. } => CliError::Numeric(e.to_string()),
            E::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
