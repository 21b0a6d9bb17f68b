//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("channel/dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("time {t} outside [0, 1]")]
    InvalidTime { t: f64 },

    #[error("step order violated: s = {s} must not exceed t = {t}")]
    StepOrder { s: f64, t: f64 },

    #[error("step count must be >= 1")]
    InvalidSteps,

    #[error("{0} must be a power of two")]
    NotPowerOfTwo(u32),

    #[error("time {t} does not lie on the {n}-step grid")]
    OffGrid { t: f64, n: u32 },

    #[error("singular distillation target at t = {t}, t'' = {t_end}: |denominator| < 1e-12")]
    SingularTarget { t: f64, t_end: f64 },

    #[error("temperature must be > 0, got {0}")]
    InvalidTemperature(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("not a probability vector: {0}")]
    NotProbability(String),

    #[error("negative loss component {name} = {value}")]
    NegativeComponent { name: String, value: f64 },

    #[error("queue not ready: need {need} embeddings, have {have}")]
    QueueNotReady { need: usize, have: usize },

    #[error("per-image sample count {k} exceeds pixel count {a}")]
    SampleCountExceedsPixels { k: usize, a: usize },

    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },

    #[error("covariance not positive semidefinite: min eigenvalue {min_eigenvalue}")]
    NotPsd { min_eigenvalue: f64 },

    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint container: {0}")]
    Container(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
