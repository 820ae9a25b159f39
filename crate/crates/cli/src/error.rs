use std::fmt;

/// Exit code 1.
pub const EXIT_VALIDATION: i32 = 1;
/// Exit code 2.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Validation { field: String, message: String },
    Runtime { context: String, message: String },
}

impl CliError {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Validation { field: field.into(), message: message.into() }
    }

    pub fn runtime(context: impl Into<String>, message: impl fmt::Display) -> Self {
        Self::Runtime { context: context.into(), message: message.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation { .. } => EXIT_VALIDATION,
            Self::Runtime { .. } => EXIT_RUNTIME,
        }
    }

    /// Single-line, `key=value` form for stderr.
    pub fn machine_line(&self) -> String {
        match self {
            Self::Validation { field, message } => {
                format!("error kind=validation field={field} message={message:?}")
            }
            Self::Runtime { context, message } => {
                format!("error kind=runtime context={context} message={message:?}")
            }
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Validation { field, message } => write!(f, "invalid {field}: {message}"),
            Self::Runtime { context, message } => write!(f, "{context}: {message}"),
        }
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

/// Attach a context name to any displayable error.
pub trait Context<T> {
    fn ctx(self, context: &str) -> CliResult<T>;
}

impl<T, E: fmt::Display> Context<T> for Result<T, E> {
    fn ctx(self, context: &str) -> CliResult<T> {
        self.map_err(|e| CliError::runtime(context, e))
    }
}
