use coop_explain_core::Error;

/// A command failure rendered as `code: message` on stderr.
#[derive(Debug)]
pub struct Failure {
    pub code: String,
    pub message: String,
    pub exit_code: u8,
}

impl Failure {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Failure {
            code: code.to_owned(),
            message: message.into(),
            exit_code: 1,
        }
    }

    /// Configuration problems exit with status 2.
    pub fn config(code: &str, message: impl Into<String>) -> Self {
        Failure {
            exit_code: 2,
            ..Failure::new(code, message)
        }
    }

    /// One line, whatever the message contains.
    pub fn render(&self) -> String {
        let flat: Vec<&str> = self.message.lines().map(str::trim).collect();
        format!("{}: {}", self.code, flat.join(" "))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::new(e.code(), e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}
