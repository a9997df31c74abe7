use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An input or configuration value lies outside an operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A projected point has non-positive camera-space depth.
    #[error("point lies behind the camera (camera-space z = {0})")]
    BehindCamera(f64),

    /// A caller broke an operation's preconditions, such as mismatched sizes.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed file contents.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    /// The optimizer produced a non-finite loss. The partial report holds
    /// every step recorded before the failure.
    #[error("optimization diverged at step {step}: {message}")]
    Diverged {
        step: usize,
        message: String,
        report: Box<crate::energy::EnergyReport>,
    },

    /// The generator failed to produce views or gradients.
    #[error("generator failure: {0}")]
    Generator(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
