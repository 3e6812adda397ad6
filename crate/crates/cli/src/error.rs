use thiserror::Error;

/// Exit code for bad input data or configuration.
pub const EXIT_INPUT: i32 = 2;
/// Exit code for a pipeline that could not produce a result.
pub const EXIT_PIPELINE: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Pipeline(String),
}

impl CliError {
    pub fn input(e: impl std::fmt::Display) -> Self {
        CliError::Input(e.to_string())
    }

    pub fn pipeline(e: impl std::fmt::Display) -> Self {
        CliError::Pipeline(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Pipeline(_) => EXIT_PIPELINE,
        }
    }
}
