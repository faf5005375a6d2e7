use poise_core::CoreError;

/// CLI failure split by exit code: config and input problems exit 2,
/// numeric failures (including missed tolerances) exit 3.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::Numeric(msg) => write!(f, "numeric failure: {msg}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(err: CoreError) -> Self {
        match err {
            CoreError::Numeric(msg) => CliError::Numeric(msg),
            other => CliError::Config(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(CliError::Config("bad".into()).exit_code(), 2);
        assert_eq!(CliError::Numeric("nan".into()).exit_code(), 3);
    }

    #[test]
    fn core_numeric_errors_map_to_exit_3() {
        let numeric: CliError = CoreError::Numeric("diverged".into()).into();
        assert_eq!(numeric.exit_code(), 3);
        let config: CliError = CoreError::InvalidConfig("bad key".into()).into();
        assert_eq!(config.exit_code(), 2);
    }
}
