use thiserror::Error;

/// Error type shared across the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes, layer names, or sample dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed binary or text input.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    /// Non-finite loss or parameters encountered during optimization.
    #[error("divergence at step {step}: {msg}")]
    Divergence { step: u64, msg: String },

    /// Aggregation cannot proceed (empty cohort, missing weights).
    #[error("aggregation error: {0}")]
    Aggregation(String),

    /// Argument outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Server/worker protocol violation.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Request that no assignment can satisfy.
    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
