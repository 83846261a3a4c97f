//! Sparse model discovery for dynamical systems with hidden (unmeasured)
//! state variables.
//!
//! The pipeline couples weak-constraint variational annealing — joint
//! estimation of the full state path and the model parameters under a
//! collocation constraint — with hard-threshold sparsification over a
//! library of candidate terms. Post-selection validation ranks the surviving
//! structures by short-horizon prediction error and information criteria.
//!
//! The crate is organized along the pipeline:
//!
//! - [`library`]: candidate function libraries and sparse models
//! - [`sim`]: trajectory generation, noise, Lyapunov times, delay embedding
//! - [`data`]: measured datasets and their CSV/JSON artifacts
//! - [`action`]: the annealed objective and its analytic gradient
//! - [`optimize`]: box-constrained limited-memory quasi-Newton minimizer
//! - [`engine`]: the annealing/thresholding sweep and candidate pooling
//! - [`validate`]: hidden-IC estimation, segment errors, AIC/BIC, Pareto
//!
//! With the default `parallel` feature, sweeps and experiment cells run on a
//! rayon worker pool; results are merged in task order so output is identical
//! for any worker count. Disabling the feature falls back to sequential
//! execution with the same results.

pub mod action;
pub mod data;
pub mod engine;
pub mod error;
pub mod library;
pub mod mat;
pub mod model;
pub mod optimize;
pub mod par;
pub mod presets;
pub mod rng;
pub mod sim;
pub mod validate;

pub use error::DahsiError;
pub use library::FunctionLibrary;
pub use mat::Mat;
pub use model::CandidateModel;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, DahsiError>;
