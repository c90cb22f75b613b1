use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Io(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Io(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Io(_) => "io",
        }
    }

    /// One JSON object for the structured error log.
    pub fn log_line(&self, command: &str) -> String {
        #[derive(Serialize)]
        struct Entry<'a> {
            level: &'static str,
            command: &'a str,
            kind: &'static str,
            exit_code: i32,
            message: String,
        }
        serde_json::to_string(&Entry {
            level: "error",
            command,
            kind: self.kind(),
            exit_code: self.exit_code(),
            message: self.to_string(),
        })
        .expect("plain struct serializes")
    }
}

impl From<bootstrap_msprt::Error> for CliError {
    fn from(e: bootstrap_msprt::Error) -> Self {
        use bootstrap_msprt::Error as E;
        match e {
            E::InvalidConfig(_) | E::CalibrationFailed { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
