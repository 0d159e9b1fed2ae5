use std::fmt;

use fence_core::Error;

/// Failure classes of the command-line tool, each with its exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Divergence(m) => write!(f, "numerical divergence: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e.root() {
            Error::Diverged { .. } | Error::Training { .. } | Error::Numerical(_) => CliError::Divergence(msg),
            _ => CliError::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divergence_is_found_through_backend_wrapping() {
        let e = Error::Backend {
            trajectory: 0,
            step: 3,
            source: Box::new(Error::Diverged { trajectory: 0, step: 3 }),
        };
        assert_eq!(CliError::from(e).exit_code(), 4);
        assert_eq!(CliError::from(Error::InvalidInput("x".into())).exit_code(), 3);
    }
}
