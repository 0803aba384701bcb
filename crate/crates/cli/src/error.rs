use serde::Serialize;

/// Failure classes with their process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {message}")]
    Config { message: String, keys: Vec<String> },
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Internal(String),
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    exit_code: i32,
    message: String,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    keys: &'a [String],
}

impl CliError {
    pub fn config(message: impl Into<String>, keys: Vec<String>) -> Self {
        CliError::Config {
            message: message.into(),
            keys,
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError::Data(message.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Internal(_) => 1,
        }
    }

    pub fn keys(&self) -> &[String] {
        match self {
            CliError::Config { keys, .. } => keys,
            _ => &[],
        }
    }

    /// One-line JSON for stderr.
    pub fn record(&self) -> String {
        let kind = match self {
            CliError::Config { .. } => "config",
            CliError::Data(_) => "data",
            CliError::Numerical(_) => "numerical",
            CliError::Internal(_) => "internal",
        };
        let message = match self {
            CliError::Config { message, .. } => message.clone(),
            other => other.to_string(),
        };
        serde_json::to_string(&ErrorRecord {
            error: kind,
            exit_code: self.exit_code(),
            message,
            keys: self.keys(),
        })
        .expect("error record serializes")
    }
}

impl From<ddgp::Error> for CliError {
    fn from(e: ddgp::Error) -> Self {
        use ddgp::Error as E;
        match e {
            E::Io { .. } | E::Format(_) => CliError::Data(e.to_string()),
            E::Cholesky { .. } | E::Numerical(_) | E::Domain(_) => CliError::Numerical(e.to_string()),
            E::Argument(_) | E::Unsupported(_) | E::Shape(_) => CliError::config(e.to_string(), vec![]),
            E::Serde(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
