//! Exit-code contract: 0 success, 2 config, 3 input, 4 checkpoint, 5 truncation.

use std::fmt;

use wsbs_core::Error;

pub const CONFIG: u8 = 2;
pub const INPUT: u8 = 3;
pub const CHECKPOINT: u8 = 4;
pub const TRUNCATED: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(CONFIG, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(INPUT, message)
    }

    /// Default classification of a library error.
    pub fn from_core(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Argument(_) => CONFIG,
            Error::Incompatible { .. } | Error::Checkpoint(_) => CHECKPOINT,
            _ => INPUT,
        };
        Self::new(code, e.to_string())
    }

    /// Any error while reading a checkpoint is a checkpoint failure.
    pub fn checkpoint(e: Error) -> Self {
        Self::new(CHECKPOINT, e.to_string())
    }

    pub fn context(mut self, what: &str) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::from_core(e)
    }
}
