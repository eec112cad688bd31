use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] bevplace::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(bevplace::Error::Io(e))
    }
}

impl CliError {
    /// Process exit status: 1 usage, 2 IO, 3 data, 4 numeric divergence,
    /// 5 fit failure.
    pub fn exit_code(&self) -> i32 {
        use bevplace::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e {
                E::Io(_) => 2,
                E::Divergence(_) | E::NonConvergence(_) => 4,
                E::Fit(_) => 5,
                _ => 3,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
