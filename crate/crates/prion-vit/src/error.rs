use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left {lhs:?}, right {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("invalid axis {axis} for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },

    #[error("tape already consumed by a backward pass; call reset() before reuse")]
    TapeConsumed,

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("function is not deterministic: two forward passes returned {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("non-finite {what} in {name}")]
    NonFinite { what: &'static str, name: String },

    #[error("empty mode set: rendering needs at least one fiber mode")]
    EmptyModeSet,

    #[error("zero variance in {what}: result undefined")]
    ZeroVariance { what: &'static str },

    #[error("invalid temperature grid: t_min {t_min} must be below t_max {t_max} with step {step} > 0")]
    InvalidGrid { t_min: f64, t_max: f64, step: f64 },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest parse error: {0}")]
    Manifest(String),

    #[error("image decode error: {0}")]
    ImageDecode(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
