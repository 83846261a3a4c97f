//! Ground-truth preset systems used for data generation and benchmarks.

use std::sync::Arc;

use crate::engine::lambda_linear_grid;
use crate::library::build_monomial_library;
use crate::mat::Mat;
use crate::model::CandidateModel;

/// A named ground-truth system with everything a benchmark needs: the true
/// sparse model, a reference on-attractor initial condition, the sampling
/// step, and calibrated threshold grids for discovery runs.
#[derive(Debug, Clone)]
pub struct PresetSystem {
    pub name: &'static str,
    pub model: CandidateModel,
    pub x0: Vec<f64>,
    pub dt: f64,
    /// Short threshold window that recovers the true structure on clean data;
    /// robustness studies run over exactly this window.
    pub lambda_window: Vec<f64>,
    /// Wider default threshold grid for full discovery sweeps.
    pub sweep_grid: Vec<f64>,
    /// Optional per-(equation, term) restriction of the library.
    pub allowed_terms: Option<Vec<bool>>,
}

fn model_from_entries(
    dimension: usize,
    degree: usize,
    entries: &[(usize, usize, f64)],
) -> CandidateModel {
    let lib = Arc::new(build_monomial_library(dimension, degree));
    let mut params = Mat::zeros(dimension, lib.len());
    for &(k, j, v) in entries {
        *params.at_mut(k, j) = v;
    }
    CandidateModel::from_params(lib, params)
}

/// Classical Lorenz system, sigma=10, rho=28, beta=8/3, seven active terms
/// in the degree-two basis `[1, x, y, z, x^2, xy, xz, y^2, yz, z^2]`.
pub fn lorenz() -> PresetSystem {
    let model = model_from_entries(
        3,
        2,
        &[
            (0, 1, -10.0),
            (0, 2, 10.0),
            (1, 1, 28.0),
            (1, 2, -1.0),
            (1, 6, -1.0),
            (2, 3, -8.0 / 3.0),
            (2, 5, 1.0),
        ],
    );
    PresetSystem {
        name: "lorenz",
        model,
        // state reached by integrating (1, 1, 1) for 30 time units; on the
        // attractor so N=501 at dt=0.01 samples both lobes
        x0: vec![6.685303188124568, 1.316143095211151, 31.17183833061584],
        dt: 0.01,
        lambda_window: vec![0.4, 0.5],
        sweep_grid: lambda_linear_grid(0.1, 0.1, 1.0),
        allowed_terms: None,
    }
}

/// Lorenz-like circuit equations with the first-principles parameter values:
/// dx/dt = s(y - x), dy/dt = r x - g y - e xz, dz/dt = -b z + h xy.
pub fn circuit() -> PresetSystem {
    let model = model_from_entries(
        3,
        2,
        &[
            (0, 1, -12.9032),
            (0, 2, 12.9032),
            (1, 1, 54.2903),
            (1, 2, -1.2903),
            (1, 6, -14.2857),
            (2, 3, -3.8259),
            (2, 5, 3.4843),
        ],
    );
    PresetSystem {
        name: "circuit",
        model,
        // on-attractor state after 30 time units from (1, 1, 3.7)
        x0: vec![
            -2.042502597924648,
            -3.413160556494959,
            2.795194214705807,
        ],
        dt: 0.01,
        lambda_window: vec![3.8, 3.9],
        sweep_grid: lambda_linear_grid(2.5, 0.1, 5.5),
        allowed_terms: None,
    }
}

/// The seven-term structure fitted to the circuit data (for comparisons and
/// rendering tests; not a generator preset).
pub fn circuit_seven_term_fit() -> CandidateModel {
    model_from_entries(
        3,
        2,
        &[
            (0, 1, -16.9554),
            (0, 2, 18.7853),
            (1, 1, 24.3535),
            (1, 2, 0.2580),
            (1, 6, -6.7054),
            (2, 3, -3.6835),
            (2, 5, 4.8273),
        ],
    )
}

/// Two-level trap semiconductor kinetics, six active terms:
/// dx/dt = e y - R xz, dy/dt = -e y + R xz, dz/dt = e y - R xz
/// with e = 0.5, R = 0.25. The library restriction mirrors the physically
/// sensible generic model: `1, x, y, z, x^2, xz` in the first two equations
/// and `1, x, y, z, xz` in the third.
pub fn semiconductor() -> PresetSystem {
    let model = model_from_entries(
        3,
        2,
        &[
            (0, 2, 0.5),
            (0, 6, -0.25),
            (1, 2, -0.5),
            (1, 6, 0.25),
            (2, 2, 0.5),
            (2, 6, -0.25),
        ],
    );
    let q = model.library().len();
    let mut allowed = vec![false; 3 * q];
    for j in [0usize, 1, 2, 3, 4, 6] {
        allowed[j] = true;
        allowed[q + j] = true;
    }
    for j in [0usize, 1, 2, 3, 6] {
        allowed[2 * q + j] = true;
    }
    PresetSystem {
        name: "semiconductor",
        model,
        x0: vec![1.0, 0.5, 0.8],
        dt: 0.01,
        lambda_window: vec![0.19],
        sweep_grid: lambda_linear_grid(0.1, 0.01, 0.3),
        allowed_terms: Some(allowed),
    }
}

/// Lotka-Volterra predator-prey system, four active terms in the degree-two
/// basis `[1, x, y, x^2, xy, y^2]`:
/// dx/dt = x - 0.5 xy, dy/dt = -y + 0.25 xy.
pub fn lotka_volterra() -> PresetSystem {
    let model = model_from_entries(
        2,
        2,
        &[(0, 1, 1.0), (0, 4, -0.5), (1, 2, -1.0), (1, 4, 0.25)],
    );
    PresetSystem {
        name: "lotka-volterra",
        model,
        x0: vec![1.0, 1.0],
        dt: 0.05,
        lambda_window: vec![0.1],
        sweep_grid: lambda_linear_grid(0.05, 0.05, 0.5),
        allowed_terms: None,
    }
}

/// Look up a preset by its CLI name.
pub fn by_name(name: &str) -> Option<PresetSystem> {
    match name {
        "lorenz" => Some(lorenz()),
        "circuit" => Some(circuit()),
        "semiconductor" => Some(semiconductor()),
        "lotka-volterra" => Some(lotka_volterra()),
        _ => None,
    }
}
