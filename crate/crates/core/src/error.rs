use thiserror::Error;

/// Errors raised by the testbed library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid class distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid mixture spec: {0}")]
    InvalidSpec(String),

    #[error("class id {class} out of range (spec has {n_classes} classes)")]
    InvalidClass { class: usize, n_classes: usize },

    #[error("class {0} has prior 1; no other class to draw true negatives from")]
    NoOtherClass(usize),

    #[error("operation requires a discrete-mode spec")]
    RequiresDiscrete,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate projection: pre-projection norm {0:e} below 1e-12")]
    DegenerateProjection(f64),

    #[error("eta must lie in [0, 1), got {0}")]
    EtaOutOfRange(f64),

    #[error("eta provider needs token sequences but the data point has none")]
    MissingTokens,

    #[error("N = {n} is below the threshold (1 - rho_min) / rho_min = {threshold}")]
    BelowThreshold { n: usize, threshold: f64 },

    #[error("numeric failure at step {step} (batch seed {batch_seed:#x}): {what}")]
    NumericFailure {
        step: usize,
        batch_seed: u64,
        what: String,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("label subset is missing class(es) after {tries} resampling attempts")]
    MissingClassInLabels { tries: usize },

    #[error("missing prompt for class {0}")]
    MissingPrompt(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
