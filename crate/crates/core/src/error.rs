use thiserror::Error;

/// Error type shared by every module in the crate.
///
/// The split matters for the CLI: config and input problems map to exit
/// code 2, numeric failures to exit code 3.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("token {token} out of range for vocab size {vocab}")]
    InvalidToken { token: usize, vocab: usize },

    #[error("feature layer {layer} outside 1..={layers}")]
    InvalidLayer { layer: usize, layers: usize },

    #[error("operation requires {required} task family, got {got}")]
    UnsupportedFamily {
        required: &'static str,
        got: &'static str,
    },

    #[error("outcome space too large: {size} outcomes, limit {limit}")]
    OutcomeSpaceTooLarge { size: usize, limit: usize },

    #[error("rollout has no generated tokens")]
    EmptyRollout,

    #[error("need at least {required} rollouts per prompt, got {got}")]
    InsufficientRollouts { required: usize, got: usize },

    #[error("group needs at least {required} rollouts, got {got}")]
    InsufficientGroup { required: usize, got: usize },

    #[error("probe is not fitted")]
    ProbeNotFitted,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
