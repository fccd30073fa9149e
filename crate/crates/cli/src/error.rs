use std::fmt;

/// Exit-code-bearing CLI failure: 2 for usage and configuration problems,
/// 1 for everything that goes wrong while working.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(Vec<String>),
    /// A diagnostic or assertion did not hold; the report says which.
    Failed(String),
    Core(dfp::Error),
    Io(std::io::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn config(problems: Vec<String>) -> Self {
        CliError::Config(problems)
    }

    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Core(dfp::Error::InvalidConfig(_) | dfp::Error::UnknownEnv(_)) => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(p) => {
                write!(f, "invalid configuration:")?;
                for line in p {
                    write!(f, "\n  {line}")?;
                }
                Ok(())
            }
            CliError::Failed(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<dfp::Error> for CliError {
    fn from(e: dfp::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}
