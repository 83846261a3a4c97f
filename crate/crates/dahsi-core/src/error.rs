//! Crate error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DahsiError {
    #[error("library mismatch: operands were built against different libraries")]
    LibraryMismatch,

    #[error("unknown library term `{0}`")]
    UnknownTerm(String),

    #[error("trajectory blow-up: non-finite state first seen at step {step}")]
    BlowUp { step: usize },

    #[error("series too short: need at least {needed} points, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("non-uniform time grid at row {row} (relative jitter {jitter:.3e})")]
    NonUniformGrid { row: usize, jitter: f64 },

    #[error("non-finite value in data at row {row}, column {col}")]
    NonFiniteCell { row: usize, col: usize },

    #[error("objective is non-finite at the start point")]
    NonFiniteStart,

    #[error("invalid settings: {0}")]
    InvalidSettings(String),

    #[error("hidden-variable initial guess: redraw cap of {cap} exceeded")]
    RedrawCapExceeded { cap: usize },

    #[error("unidentifiable initial condition: hidden-variable coefficient is zero")]
    UnidentifiableIc,

    #[error(
        "equation is nonlinear in the hidden variable; closed-form solve unavailable \
         (enable the root-finder fallback)"
    )]
    NonlinearHidden,

    #[error("annealing run failed (lambda={lambda}, seed={seed}, beta={beta}): {source}")]
    AnnealFailed {
        lambda: f64,
        seed: u64,
        beta: usize,
        #[source]
        source: Box<DahsiError>,
    },

    #[error("{0}")]
    Msg(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
