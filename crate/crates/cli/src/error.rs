use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, unreadable or invalid configuration. Exit code 2.
    #[error("{0}")]
    Config(String),
    /// Failure after the run started. Exit code 3.
    #[error("{0}")]
    Runtime(String),
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    code: i32,
    message: String,
}

impl CliError {
    pub fn config(msg: impl std::fmt::Display) -> Self {
        CliError::Config(msg.to_string())
    }

    pub fn runtime(msg: impl std::fmt::Display) -> Self {
        CliError::Runtime(msg.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    /// Single-line JSON rendering for stderr.
    pub fn json_line(&self) -> String {
        let kind = match self {
            CliError::Config(_) => "config",
            CliError::Runtime(_) => "runtime",
        };
        let line = ErrorLine { error: kind, code: self.exit_code(), message: self.to_string() };
        serde_json::to_string(&line).expect("plain struct serialises")
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_line_is_one_line() {
        let e = CliError::config("bad\nvalue");
        let line = e.json_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["code"], 2);
        assert_eq!(v["error"], "config");
        assert_eq!(CliError::runtime("x").exit_code(), 3);
    }
}
