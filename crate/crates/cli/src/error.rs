use std::fmt;
use std::path::Path;

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn missing(what: &str, flag: &str) -> Self {
        CliError::Data(format!("missing {what}: pass {flag} <path>"))
    }

    pub fn not_found(what: &str, path: &Path) -> Self {
        CliError::Data(format!("{what} not found: {}", path.display()))
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

impl From<freqalign::Error> for CliError {
    fn from(e: freqalign::Error) -> Self {
        use freqalign::Error as E;
        let msg = e.to_string();
        match e {
            E::DegenerateFit(_) | E::InvalidFit(_) | E::TrainingDiverged { .. } | E::State(_) => {
                CliError::Numeric(msg)
            }
            _ => CliError::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
