use std::fmt;
use std::process::ExitCode;

use archain_core::node::is_alarm_code;

/// A failed command. `Alarm` covers every integrity failure: a ledger that
/// does not verify, a guard mismatch, or an alarm code from the node.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failed {
        code: String,
        message: String,
        /// Raw error reply from a service, echoed to stderr.
        detail: Option<String>,
    },
    Alarm {
        code: String,
        message: String,
    },
}

impl CliError {
    pub fn failed(code: impl Into<String>, message: impl fmt::Display) -> Self {
        let code = code.into();
        let message = message.to_string();
        if is_alarm_code(&code) {
            CliError::Alarm { code, message }
        } else {
            CliError::Failed {
                code,
                message,
                detail: None,
            }
        }
    }

    pub fn usage(message: impl fmt::Display) -> Self {
        CliError::Usage(message.to_string())
    }

    pub fn alarm(code: impl Into<String>, message: impl fmt::Display) -> Self {
        CliError::Alarm {
            code: code.into(),
            message: message.to_string(),
        }
    }

    pub fn with_detail(self, detail: String) -> Self {
        match self {
            CliError::Failed { code, message, .. } => CliError::Failed {
                code,
                message,
                detail: Some(detail),
            },
            other => other,
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Failed { .. } => 1,
            CliError::Usage(_) => 2,
            CliError::Alarm { .. } => 3,
        })
    }

    pub fn report(&self) {
        match self {
            CliError::Usage(m) => eprintln!("error: {m}"),
            CliError::Failed {
                code,
                message,
                detail,
            } => {
                eprintln!("error: {code}: {message}");
                if let Some(d) = detail {
                    eprintln!("{d}");
                }
            }
            CliError::Alarm { code, message } => eprintln!("ALARM: {code}: {message}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::failed("IoError", e)
    }
}

impl From<reqwest::Error> for CliError {
    fn from(e: reqwest::Error) -> Self {
        CliError::failed("Unreachable", e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::failed("BadResponse", e)
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;
