use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] regseg_core::Error),

    /// A verification suite did not pass.
    #[error("{0}")]
    Failed(String),

    #[error("cannot write report: {0}")]
    Output(String),
}

impl CliError {
    /// 0 is success; config 2, format 3, binding 4, corruption 5, other 1.
    pub fn exit_code(&self) -> i32 {
        use regseg_core::Error as E;
        match self {
            CliError::Core(E::Config(_)) => 2,
            CliError::Core(E::Format(_)) => 3,
            CliError::Core(E::Binding { .. }) => 4,
            CliError::Core(E::Corruption(_)) => 5,
            _ => 1,
        }
    }
}
