//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed config document or unknown key. The message carries the
    /// offending key or position as reported by the JSON parser.
    #[error("config parse error: {0}")]
    Parse(String),

    #[error("invalid value for `{key}`: {reason}")]
    InvalidValue { key: &'static str, reason: String },

    #[error("`{left}` ({left_value}) must be divisible by `{right}` ({right_value})")]
    Divisibility {
        left: &'static str,
        right: &'static str,
        left_value: u64,
        right_value: u64,
    },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("vector length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Collectives carry no FLOPs and are costed by the schedule transforms;
    /// one reaching the roofline estimator means the caller skipped them.
    #[error("collective op `{0}` cannot be costed by the roofline estimator")]
    UnexpectedCollective(String),

    #[error("not a fusable chain: {0}")]
    NotAChain(String),

    #[error("nothing to fuse: {0}")]
    AlreadyFused(String),

    #[error("schedule has {schedule} events but {estimates} estimates were supplied")]
    IndexMismatch { schedule: usize, estimates: usize },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),
}
