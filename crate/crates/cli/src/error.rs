use std::fmt;

/// CLI failures, each mapped to a process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad or inconsistent configuration; nothing is written.
    Config(String),
    /// All particle weights vanished.
    Collapse(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Collapse(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Collapse(m) => write!(f, "weight collapse: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<bayesfusion::FusionError> for CliError {
    fn from(e: bayesfusion::FusionError) -> Self {
        match e {
            bayesfusion::FusionError::WeightCollapse { .. } => CliError::Collapse(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
