// scratch: convergence curve of the beta=0 subproblem
use dahsi_core::action::{active_from_mask, ActionProblem};
use dahsi_core::engine::{init_states, state_bounds};
use dahsi_core::optimize::{minimize_box, MinimizeSettings};
use dahsi_core::presets;
use dahsi_core::rng::stream_rng;
use dahsi_core::sim::{make_dataset, simulate_rk4};
use rand::Rng;
use std::time::Instant;

fn main() {
    let preset = presets::lorenz();
    let traj = simulate_rk4(&preset.model, &preset.x0, preset.dt, 501).unwrap();
    let data = make_dataset(&traj, &[0, 2], preset.dt).unwrap();
    let lib = preset.model.library().clone();
    let d = 3;
    let q = lib.len();
    let (state_lo, state_hi) = state_bounds(&data, d, 2.0);
    let mut rng = stream_rng(1, &[]);
    let mut est = init_states(&data, &lib, &state_lo, &state_hi, &mut rng);
    for i in 0..est.states.rows() {
        *est.states.at_mut(i, 1) = rng.gen_range(-30.0..30.0);
    }
    let mask = vec![true; d * q];
    let active = active_from_mask(&mask, q);
    let mut problem = ActionProblem::new(&data, &lib, active, 1e-2);
    let n_state = problem.n_states();
    let mut lower: Vec<f64> = (0..n_state).map(|i| state_lo[i % d]).collect();
    let mut upper: Vec<f64> = (0..n_state).map(|i| state_hi[i % d]).collect();
    for _ in 0..problem.active().len() { lower.push(-100.0); upper.push(100.0); }

    let mut x = problem.pack(&est);
    let t0 = Instant::now();
    for chunk in 0..12 {
        let mut settings = MinimizeSettings::new(lower.clone(), upper.clone());
        settings.max_iters = 2000;
        settings.f_tol = 1e-18;
        let m = minimize_box(|p, g| problem.eval(p, Some(g)), &x, &settings).unwrap();
        x = m.x;
        let est_now = problem.unpack(&x);
        let am = dahsi_core::action::model_error(&lib, &est_now.params, &est_now.states, 0.01);
        println!("iters={:<6} f={:.4e} A_M={:.3e} status={:?} t={:.1}s",
            (chunk + 1) * 2000, m.value, am, m.status, t0.elapsed().as_secs_f64());
        if matches!(m.status, dahsi_core::optimize::Status::ConvergedProgress | dahsi_core::optimize::Status::ConvergedGradient) && m.iterations < 2000 {
            break;
        }
    }
    let est_now = problem.unpack(&x);
    let model = dahsi_core::model::CandidateModel::from_params(lib.clone(), est_now.params.clone());
    println!("params at bottom:\n{}", model.to_text());
}
