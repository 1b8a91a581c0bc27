use std::fmt;

use ridnet_core::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_DATA: u8 = 5;

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(EXIT_DATA, message)
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self::new(EXIT_NUMERIC, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
            Error::Io { .. } => EXIT_IO,
            Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
            Error::ShapeMismatch(_)
            | Error::ChannelMismatch { .. }
            | Error::NonScalarLoss(_)
            | Error::BackwardTwice
            | Error::MissingGrad(_)
            | Error::Decode(_)
            | Error::ImageTooSmall { .. }
            | Error::EmptyCorpus
            | Error::Checkpoint(_) => EXIT_DATA,
        };
        CliError::new(code, e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
