//! Trajectory generation and analysis: fixed-step RK4, seeded measurement
//! noise, largest-Lyapunov-exponent estimation, and time-delay embedding.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::error::DahsiError;
use crate::mat::Mat;
use crate::model::CandidateModel;
use crate::rng::stream_rng;
use crate::Result;

/// Classical fixed-step RK4. Row 0 is `x0`; `n` rows total.
///
/// A non-finite state aborts with the index of the first bad row.
pub fn simulate_rk4(model: &CandidateModel, x0: &[f64], dt: f64, n: usize) -> Result<Mat> {
    assert!(n >= 1, "need at least one sample");
    assert!(dt > 0.0, "time step must be positive");
    let d = model.dimension();
    assert_eq!(x0.len(), d);
    let mut out = Mat::zeros(n, d);
    out.row_mut(0).copy_from_slice(x0);
    let mut state = x0.to_vec();
    let mut work = Rk4Work::new(model);
    for i in 1..n {
        work.step(model, &mut state, dt);
        if state.iter().any(|v| !v.is_finite()) {
            return Err(DahsiError::BlowUp { step: i });
        }
        out.row_mut(i).copy_from_slice(&state);
    }
    Ok(out)
}

/// Scratch buffers for repeated in-place RK4 stepping.
struct Rk4Work {
    basis: Vec<f64>,
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Work {
    fn new(model: &CandidateModel) -> Self {
        let d = model.dimension();
        let q = model.library().len();
        Self {
            basis: vec![0.0; q],
            k1: vec![0.0; d],
            k2: vec![0.0; d],
            k3: vec![0.0; d],
            k4: vec![0.0; d],
            tmp: vec![0.0; d],
        }
    }

    fn step(&mut self, model: &CandidateModel, state: &mut [f64], dt: f64) {
        let d = state.len();
        model.rhs_into(state, &mut self.basis, &mut self.k1);
        for k in 0..d {
            self.tmp[k] = state[k] + 0.5 * dt * self.k1[k];
        }
        model.rhs_into(&self.tmp, &mut self.basis, &mut self.k2);
        for k in 0..d {
            self.tmp[k] = state[k] + 0.5 * dt * self.k2[k];
        }
        model.rhs_into(&self.tmp, &mut self.basis, &mut self.k3);
        for k in 0..d {
            self.tmp[k] = state[k] + dt * self.k3[k];
        }
        model.rhs_into(&self.tmp, &mut self.basis, &mut self.k4);
        for k in 0..d {
            state[k] +=
                dt / 6.0 * (self.k1[k] + 2.0 * self.k2[k] + 2.0 * self.k3[k] + self.k4[k]);
        }
    }
}

/// Additive Gaussian noise with standard deviation `omega`.
///
/// Each (row, column) cell draws from its own substream keyed by the cell
/// coordinates, so the noise on a column does not depend on which other
/// columns exist. `col_keys` maps matrix columns to substream keys; use
/// [`add_noise`] when columns are already in full-state order.
pub fn add_noise_keyed(traj: &Mat, omega: f64, seed: u64, col_keys: &[usize]) -> Mat {
    assert!(omega >= 0.0, "noise std must be non-negative");
    assert_eq!(col_keys.len(), traj.cols());
    if omega == 0.0 {
        return traj.clone();
    }
    let normal = Normal::new(0.0, omega).expect("valid std");
    let mut out = traj.clone();
    for i in 0..traj.rows() {
        for (c, &key) in col_keys.iter().enumerate() {
            let mut rng = stream_rng(seed, &[0x6e6f_6973_65, i as u64, key as u64]);
            *out.at_mut(i, c) += normal.sample(&mut rng);
        }
    }
    out
}

/// [`add_noise_keyed`] with columns keyed by their own position.
pub fn add_noise(traj: &Mat, omega: f64, seed: u64) -> Mat {
    let keys: Vec<usize> = (0..traj.cols()).collect();
    add_noise_keyed(traj, omega, seed, &keys)
}

/// Select measured columns of a trajectory into a [`Dataset`].
pub fn make_dataset(traj: &Mat, measured_indices: &[usize], dt: f64) -> Result<Dataset> {
    let values = traj.select_cols(measured_indices);
    Dataset::new(values, measured_indices.to_vec(), dt)
}

/// Largest Lyapunov exponent by two-trajectory separation with periodic
/// renormalization: initial offset 1e-8, renormalized every 1 time unit,
/// first 10% of the horizon discarded as transient.
pub fn largest_lyapunov_exponent(
    model: &CandidateModel,
    x0: &[f64],
    dt: f64,
    horizon: f64,
) -> Result<f64> {
    const D0: f64 = 1e-8;
    const RENORM_INTERVAL: f64 = 1.0;
    let d = model.dimension();
    let steps = (horizon / dt).round() as usize;
    let steps_per_block = (RENORM_INTERVAL / dt).round().max(1.0) as usize;
    let transient_steps = steps / 10;

    let mut a = x0.to_vec();
    let mut b = x0.to_vec();
    b[0] += D0;
    let mut work = Rk4Work::new(model);
    let mut sum_log = 0.0;
    let mut counted_time = 0.0;
    let mut step = 0;
    while step < steps {
        let block = steps_per_block.min(steps - step);
        for _ in 0..block {
            work.step(model, &mut a, dt);
            work.step(model, &mut b, dt);
            step += 1;
            if a.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
                return Err(DahsiError::BlowUp { step });
            }
        }
        let mut dist2 = 0.0;
        for k in 0..d {
            let diff = b[k] - a[k];
            dist2 += diff * diff;
        }
        let dist = dist2.sqrt();
        if dist > 0.0 {
            if step > transient_steps {
                sum_log += (dist / D0).ln();
                counted_time += block as f64 * dt;
            }
            let scale = D0 / dist;
            for k in 0..d {
                b[k] = a[k] + (b[k] - a[k]) * scale;
            }
        }
    }
    if counted_time == 0.0 {
        return Err(DahsiError::Msg("horizon too short for Lyapunov estimate".into()));
    }
    Ok(sum_log / counted_time)
}

/// Inverse of the largest Lyapunov exponent; `+inf` for non-chaotic systems
/// (non-positive exponent).
pub fn lyapunov_time(model: &CandidateModel, x0: &[f64], dt: f64, horizon: f64) -> Result<f64> {
    let lambda = largest_lyapunov_exponent(model, x0, dt, horizon)?;
    if lambda <= 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(1.0 / lambda)
    }
}

/// Time-delay embedding: row `i` is `(s_i, s_{i+tau}, ..., s_{i+(m-1)tau})`.
pub fn delay_embed(series: &[f64], tau_steps: usize, embed_dim: usize) -> Result<Mat> {
    assert!(embed_dim >= 1, "embedding dimension must be at least 1");
    assert!(tau_steps >= 1 || embed_dim == 1, "delay must be at least one step");
    let span = (embed_dim - 1) * tau_steps;
    if series.len() <= span {
        return Err(DahsiError::TooShort {
            needed: span + 1,
            got: series.len(),
        });
    }
    let rows = series.len() - span;
    let mut out = Mat::zeros(rows, embed_dim);
    for i in 0..rows {
        for m in 0..embed_dim {
            *out.at_mut(i, m) = series[i + m * tau_steps];
        }
    }
    Ok(out)
}

/// Uniform random state in a per-variable box.
pub fn uniform_in_box<R: Rng>(rng: &mut R, lower: &[f64], upper: &[f64]) -> Vec<f64> {
    lower
        .iter()
        .zip(upper)
        .map(|(&lo, &hi)| rng.gen_range(lo..=hi))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library::build_monomial_library;
    use crate::presets;
    use std::sync::Arc;

    fn decay_model() -> CandidateModel {
        // 1-D: dx/dt = -x over the [1, x] basis
        let lib = Arc::new(build_monomial_library(1, 1));
        let mut params = Mat::zeros(1, 2);
        *params.at_mut(0, 1) = -1.0;
        CandidateModel::from_params(lib, params)
    }

    #[test]
    fn rk4_matches_exponential_decay() {
        let traj = simulate_rk4(&decay_model(), &[1.0], 0.01, 2).unwrap();
        assert!((traj.at(1, 0) - (-0.01f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn rk4_single_row_is_initial_condition() {
        let traj = simulate_rk4(&presets::lorenz().model, &[1.0, 2.0, 3.0], 0.01, 1).unwrap();
        assert_eq!(traj.row(0), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn rk4_global_error_is_fourth_order() {
        // endpoint error on dx/dt = -x over unit time shrinks ~16x per halving
        let model = decay_model();
        let exact = (-1.0f64).exp();
        let err = |dt: f64| {
            let n = (1.0 / dt).round() as usize + 1;
            let traj = simulate_rk4(&model, &[1.0], dt, n).unwrap();
            (traj.at(n - 1, 0) - exact).abs()
        };
        let ratio = err(0.02) / err(0.01);
        assert!((ratio - 16.0).abs() <= 2.0, "ratio {ratio}");
    }

    #[test]
    fn rk4_blow_up_reports_first_bad_step() {
        // dx/dt = x^2 from x=1 blows up at t=1
        let lib = Arc::new(build_monomial_library(1, 2));
        let mut params = Mat::zeros(1, 3);
        *params.at_mut(0, 2) = 1.0;
        let model = CandidateModel::from_params(lib, params);
        match simulate_rk4(&model, &[1.0], 0.05, 100) {
            Err(DahsiError::BlowUp { step }) => assert!(step > 10 && step < 40),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn lorenz_visits_both_lobes_in_training_window() {
        let preset = presets::lorenz();
        let traj = simulate_rk4(&preset.model, &preset.x0, preset.dt, 501).unwrap();
        let xs = traj.col(0);
        let crossings = xs.windows(2).filter(|w| w[0] * w[1] < 0.0).count();
        assert!(crossings >= 2, "expected lobe crossings, got {crossings}");
        // the delay embedding of x must fill both half-planes
        let emb = delay_embed(&xs, 2, 2).unwrap();
        assert!(emb.iter().any(|v| v > 5.0) && emb.iter().any(|v| v < -5.0));
    }

    #[test]
    fn noise_zero_is_identity_and_seeded_noise_is_deterministic() {
        let traj = simulate_rk4(&presets::lorenz().model, &[1.0, 1.0, 1.0], 0.01, 50).unwrap();
        assert_eq!(add_noise(&traj, 0.0, 3).as_slice(), traj.as_slice());
        let a = add_noise(&traj, 0.01, 3);
        let b = add_noise(&traj, 0.01, 3);
        assert_eq!(a.as_slice(), b.as_slice());
        let c = add_noise(&traj, 0.01, 4);
        assert_ne!(a.as_slice(), c.as_slice());
    }

    #[test]
    fn noise_sample_std_matches_omega() {
        let traj = Mat::zeros(50_000, 2);
        let noisy = add_noise(&traj, 0.01, 11);
        let n = (noisy.rows() * noisy.cols()) as f64;
        let mean: f64 = noisy.iter().sum::<f64>() / n;
        let var: f64 = noisy.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        assert!((std - 0.01).abs() < 0.0002, "std {std}");
    }

    #[test]
    fn noise_commutes_with_column_selection() {
        let traj = simulate_rk4(&presets::lorenz().model, &[1.0, 1.0, 1.0], 0.01, 40).unwrap();
        let sel = [0usize, 2];
        let noised_then_selected = add_noise(&traj, 0.05, 9).select_cols(&sel);
        let selected_then_noised = add_noise_keyed(&traj.select_cols(&sel), 0.05, 9, &sel);
        assert_eq!(
            noised_then_selected.as_slice(),
            selected_then_noised.as_slice()
        );
    }

    #[test]
    fn dataset_selection_records_metadata() {
        let traj = simulate_rk4(&presets::lorenz().model, &[1.0, 1.0, 1.0], 0.01, 30).unwrap();
        let ds = make_dataset(&traj, &[0, 2], 0.01).unwrap();
        assert_eq!(ds.n_cols(), 2);
        assert_eq!(ds.measured_indices(), &[0, 2]);
        let all = make_dataset(&traj, &[0, 1, 2], 0.01).unwrap();
        assert_eq!(all.n_cols(), 3);
        let one = make_dataset(&traj, &[0], 0.01).unwrap();
        assert_eq!(one.n_cols(), 1);
    }

    #[test]
    fn contracting_system_has_infinite_lyapunov_time() {
        let t = lyapunov_time(&decay_model(), &[1.0], 0.01, 50.0).unwrap();
        assert!(t.is_infinite());
    }

    /// Independent oracle: tangent-space exponent with the hard-coded Lorenz
    /// Jacobian propagated along the trajectory, renormalizing every step.
    fn lorenz_tangent_exponent(x0: [f64; 3], dt: f64, horizon: f64) -> f64 {
        let (sigma, rho, beta) = (10.0, 28.0, 8.0 / 3.0);
        let f = |s: &[f64; 3]| {
            [
                sigma * (s[1] - s[0]),
                s[0] * (rho - s[2]) - s[1],
                s[0] * s[1] - beta * s[2],
            ]
        };
        let jv = |s: &[f64; 3], v: &[f64; 3]| {
            [
                sigma * (v[1] - v[0]),
                (rho - s[2]) * v[0] - v[1] - s[0] * v[2],
                s[1] * v[0] + s[0] * v[1] - beta * v[2],
            ]
        };
        let steps = (horizon / dt) as usize;
        let transient = steps / 10;
        let mut x = x0;
        let mut v = [1.0, 0.0, 0.0];
        let mut sum = 0.0;
        let mut counted = 0usize;
        for step in 0..steps {
            // RK4 on the coupled (state, tangent) system
            let k1 = f(&x);
            let m1 = jv(&x, &v);
            let x2 = [x[0] + 0.5 * dt * k1[0], x[1] + 0.5 * dt * k1[1], x[2] + 0.5 * dt * k1[2]];
            let v2 = [v[0] + 0.5 * dt * m1[0], v[1] + 0.5 * dt * m1[1], v[2] + 0.5 * dt * m1[2]];
            let k2 = f(&x2);
            let m2 = jv(&x2, &v2);
            let x3 = [x[0] + 0.5 * dt * k2[0], x[1] + 0.5 * dt * k2[1], x[2] + 0.5 * dt * k2[2]];
            let v3 = [v[0] + 0.5 * dt * m2[0], v[1] + 0.5 * dt * m2[1], v[2] + 0.5 * dt * m2[2]];
            let k3 = f(&x3);
            let m3 = jv(&x3, &v3);
            let x4 = [x[0] + dt * k3[0], x[1] + dt * k3[1], x[2] + dt * k3[2]];
            let v4 = [v[0] + dt * m3[0], v[1] + dt * m3[1], v[2] + dt * m3[2]];
            let k4 = f(&x4);
            let m4 = jv(&x4, &v4);
            for i in 0..3 {
                x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                v[i] += dt / 6.0 * (m1[i] + 2.0 * m2[i] + 2.0 * m3[i] + m4[i]);
            }
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if step >= transient {
                sum += norm.ln();
                counted += 1;
            }
            for vi in v.iter_mut() {
                *vi /= norm;
            }
        }
        sum / (counted as f64 * dt)
    }

    #[test]
    fn lorenz_lyapunov_matches_tangent_space_oracle() {
        let preset = presets::lorenz();
        let oracle = lorenz_tangent_exponent(
            [preset.x0[0], preset.x0[1], preset.x0[2]],
            0.001,
            1000.0,
        );
        // classical reference value for the largest exponent
        assert!((oracle - 0.906).abs() < 0.03, "oracle {oracle}");
        let implemented =
            largest_lyapunov_exponent(&preset.model, &preset.x0, 0.01, 500.0).unwrap();
        assert!(
            (implemented - oracle).abs() <= 0.1 * oracle,
            "implemented {implemented} vs oracle {oracle}"
        );
        let time = lyapunov_time(&preset.model, &preset.x0, 0.01, 500.0).unwrap();
        assert!((time - 1.10).abs() <= 0.11, "lyapunov time {time}");
    }

    #[test]
    fn fitted_circuit_model_lyapunov_time_near_reference() {
        let fit = presets::circuit_seven_term_fit();
        // on-attractor point for the fitted model
        let traj = simulate_rk4(&fit, &[1.0, 1.0, 3.0], 0.01, 2001).unwrap();
        let x0 = traj.row(2000).to_vec();
        let time = lyapunov_time(&fit, &x0, 0.01, 500.0).unwrap();
        assert!((time - 0.9).abs() <= 0.2, "lyapunov time {time}");
    }

    #[test]
    fn delay_embedding_definition() {
        let series: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        let emb = delay_embed(&series, 3, 2).unwrap();
        assert_eq!(emb.rows(), 7);
        assert_eq!(emb.row(0), &[1.0, 4.0]);
        let id = delay_embed(&series, 1, 1).unwrap();
        assert_eq!(id.col(0), series);
        assert!(delay_embed(&series[..4], 3, 3).is_err());
    }
}
