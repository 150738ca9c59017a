//! Crate-wide error type. Variants mirror the failure modes of each module;
//! the CLI maps them onto process exit codes in `run`.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },

    #[error("tensor is not a node of the active tape")]
    NotOnTape,

    #[error("invalid layer widths: {0}")]
    InvalidWidths(String),

    #[error("model file format mismatch: {0}")]
    FormatVersionMismatch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("sobol dimension {d} exceeds the embedded table limit {max}")]
    DimensionTooLarge { d: usize, max: usize },

    #[error("kappa {kappa} outside (0, 1]")]
    KappaOutOfRange { kappa: f64 },

    #[error("singular linear system (pivot column {pivot})")]
    SingularSystem { pivot: usize },

    #[error("contraction report needs at least 2 recorded layers, got {got}")]
    InsufficientLayers { got: usize },

    #[error("operator norm is zero; cannot calibrate")]
    ZeroNorm,

    #[error("input is constant up to tolerance; cannot normalize")]
    DegenerateConstantInput,

    #[error("unknown kind: {0}")]
    UnknownKind(String),

    #[error("learning rate schedule is empty")]
    EmptySchedule,

    #[error("forward pass diverged at layer {layer} (sup-norm {sup:.3e})")]
    DivergedForward { layer: usize, sup: f64 },

    #[error("radius must be positive, got {r}")]
    NonPositiveRadius { r: f64 },

    #[error("evaluation points coincide")]
    CoincidentPoints,

    #[error("fixed-point iteration did not converge within {iters} iterations")]
    NotConverged { iters: usize, last: Vec<f64> },

    #[error("reference function has zero norm")]
    ZeroReference,

    #[error("empty input")]
    EmptyInput,

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Process exit code contract: 2 config, 3 diverged/not-contractive, 4 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidWidths(_)
            | Error::InvalidRange(_)
            | Error::UnknownKind(_)
            | Error::EmptySchedule
            | Error::KappaOutOfRange { .. }
            | Error::DimensionTooLarge { .. } => 2,
            Error::DivergedForward { .. }
            | Error::NotConverged { .. }
            | Error::NonFiniteValue { .. }
            | Error::SingularSystem { .. } => 3,
            Error::Io(_) | Error::Json(_) | Error::FormatVersionMismatch(_) => 4,
            _ => 2,
        }
    }
}
