use thiserror::Error;

pub const EXIT_WARNING: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid configuration or arguments.
    #[error("{0}")]
    Usage(String),
    /// Missing or unreadable inputs, failed writes.
    #[error("{0}")]
    Io(String),
    /// The computation itself failed, e.g. a diverged optimizer.
    #[error("{0}")]
    Runtime(String),
    /// Outputs were written but need attention.
    #[error("{0}")]
    Warning(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Warning(_) => EXIT_WARNING,
        }
    }
}

impl From<axdt::Error> for CliError {
    fn from(e: axdt::Error) -> Self {
        use axdt::Error as E;
        match e {
            E::Io { .. } | E::Format { .. } => CliError::Io(e.to_string()),
            E::InvalidArgument(_) | E::ShapeMismatch(_) | E::Domain { .. } => CliError::Usage(e.to_string()),
            E::Infeasible(_) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
