use std::fmt;

use sem_core::SemError;

/// Failure of a subcommand, split by the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable or malformed input; exit code 2.
    Input(String),
    /// The computation itself failed; exit code 3.
    Pipeline(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Pipeline(_) => 3,
        }
    }

    pub fn input(context: impl fmt::Display, err: impl fmt::Display) -> Self {
        CliError::Input(format!("{context}: {err}"))
    }

    /// Classifies a core error raised while running a computation.
    pub fn from_run(err: SemError) -> Self {
        match err {
            SemError::Io(_)
            | SemError::Json(_)
            | SemError::Format(_)
            | SemError::InvalidConfig(_)
            | SemError::BadDimensions(_)
            | SemError::ScaleMismatch(_)
            | SemError::ParamShapeMismatch { .. }
            | SemError::MissingParam(_) => CliError::Input(err.to_string()),
            _ => CliError::Pipeline(err.to_string()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Pipeline(m) => write!(f, "pipeline error: {m}"),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
