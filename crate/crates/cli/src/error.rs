use consent_core::ConsentError;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Domain(#[from] ConsentError),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(format!("json: {e}"))
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub kind: &'static str,
    pub exit_code: i32,
    pub message: String,
}

impl CliError {
    /// 2 for configuration problems, 3 for domain errors, 4 for storage.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 4,
            CliError::Domain(e) => match e {
                ConsentError::InvalidConfig(_) => 2,
                ConsentError::Io(_)
                | ConsentError::MissingCheckpoint(_)
                | ConsentError::HashMismatch
                | ConsentError::VersionUnsupported(_)
                | ConsentError::Malformed(_) => 4,
                _ => 3,
            },
        }
    }

    pub fn record(&self) -> ErrorRecord {
        let kind = match self.exit_code() {
            2 => "config",
            3 => "domain",
            _ => "io",
        };
        ErrorRecord {
            kind,
            exit_code: self.exit_code(),
            message: self.to_string(),
        }
    }
}
