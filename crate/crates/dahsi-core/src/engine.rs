//! The discovery engine: variational annealing with interleaved hard
//! thresholding, repeated over a threshold grid and many random
//! initializations, with structure pooling, down-selection, and refitting.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::action::{action, active_from_mask, ActionProblem, TrajectoryEstimate};
use crate::data::Dataset;
use crate::error::DahsiError;
use crate::library::FunctionLibrary;
use crate::mat::Mat;
use crate::model::CandidateModel;
use crate::optimize::{minimize_box, MinimizeSettings};
use crate::par::run_tasks;
use crate::rng::{derive_seed, stream_rng};
use crate::Result;

/// Annealing schedule: the model-error weight follows `R_f = r_f0 * alpha^beta`
/// for `beta = 0..=beta_max`, and the whole anneal repeats for every
/// threshold in `lambdas`.
#[derive(Debug, Clone)]
pub struct AnnealSchedule {
    pub r_f0: f64,
    pub alpha: f64,
    pub beta_max: usize,
    pub lambdas: Vec<f64>,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            r_f0: 1e-2,
            alpha: 1.1,
            beta_max: 30,
            lambdas: lambda_linear_grid(2.5, 0.1, 5.5),
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_f0 > 0.0) {
            return Err(DahsiError::InvalidSettings("r_f0 must be positive".into()));
        }
        if !(self.alpha > 1.0) {
            return Err(DahsiError::InvalidSettings("alpha must exceed 1".into()));
        }
        if self.beta_max < 1 {
            return Err(DahsiError::InvalidSettings("beta_max must be at least 1".into()));
        }
        if self.lambdas.is_empty() {
            return Err(DahsiError::InvalidSettings("threshold grid is empty".into()));
        }
        for (i, l) in self.lambdas.iter().enumerate() {
            if *l < 0.0 || !l.is_finite() {
                return Err(DahsiError::InvalidSettings("thresholds must be non-negative".into()));
            }
            if i > 0 && self.lambdas[i - 1] >= *l {
                return Err(DahsiError::InvalidSettings(
                    "thresholds must be strictly increasing".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn r_f(&self, beta: usize) -> f64 {
        self.r_f0 * self.alpha.powi(beta as i32)
    }
}

/// Inclusive linear grid `start, start+step, ..., stop` (within fp slack).
pub fn lambda_linear_grid(start: f64, step: f64, stop: f64) -> Vec<f64> {
    assert!(step > 0.0 && stop >= start);
    let n = ((stop - start) / step).round() as usize;
    (0..=n).map(|i| start + i as f64 * step).collect()
}

/// Geometric grid `start, 2*start, 4*start, ...` up to `max`.
pub fn lambda_doubling_grid(start: f64, max: f64) -> Vec<f64> {
    assert!(start > 0.0 && max >= start);
    let mut out = Vec::new();
    let mut l = start;
    while l <= max * (1.0 + 1e-12) {
        out.push(l);
        l *= 2.0;
    }
    out
}

/// How hidden state columns are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    /// I.i.d. uniform draws within the hidden-state bounds at every time point.
    Uniform,
    /// Integrate the finite-difference derivative of a random measured
    /// column from a random in-bounds start, redrawing until in bounds.
    GradientIntegral,
}

/// Engine knobs that are not part of the annealing schedule.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// State boxes are the measured data range widened by this many ranges
    /// on each side; hidden variables reuse the widest measured box.
    pub state_margin: f64,
    /// Symmetric parameter box [-param_bound, param_bound].
    pub param_bound: f64,
    /// Whether a thresholded term may re-enter at later annealing steps.
    pub readmit: bool,
    pub init: InitStrategy,
    /// Iteration cap per annealing-step minimization.
    pub max_iters: usize,
    pub g_tol: f64,
    pub f_tol: f64,
    /// Optional per-(equation, term) restriction; `None` allows everything.
    pub allowed: Option<Vec<bool>>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            state_margin: 2.0,
            param_bound: 100.0,
            readmit: false,
            init: InitStrategy::Uniform,
            max_iters: 500,
            g_tol: 1e-8,
            f_tol: 1e-12,
            allowed: None,
        }
    }
}

/// Per-variable state boxes from the measured data range; hidden slots get
/// the widest measured box.
pub fn state_bounds(data: &Dataset, dimension: usize, margin: f64) -> (Vec<f64>, Vec<f64>) {
    let mut lower = vec![f64::NAN; dimension];
    let mut upper = vec![f64::NAN; dimension];
    let mut widest = (0.0f64, 0.0f64);
    for (l, &col) in data.measured_indices().iter().enumerate() {
        let series = data.values().col(l);
        let lo = series.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = series.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = if hi > lo { hi - lo } else { 1.0 };
        let (blo, bhi) = (lo - margin * range, hi + margin * range);
        lower[col] = blo;
        upper[col] = bhi;
        if bhi - blo > widest.1 - widest.0 {
            widest = (blo, bhi);
        }
    }
    for k in 0..dimension {
        if lower[k].is_nan() {
            lower[k] = widest.0;
            upper[k] = widest.1;
        }
    }
    (lower, upper)
}

/// Hidden state slots, in increasing index order.
pub fn hidden_indices(data: &Dataset, dimension: usize) -> Vec<usize> {
    (0..dimension)
        .filter(|k| !data.measured_indices().contains(k))
        .collect()
}

/// Initialize the estimate: measured columns copy the data, hidden columns
/// draw i.i.d. uniform within their bounds, parameters start at zero.
pub fn init_states(
    data: &Dataset,
    library: &FunctionLibrary,
    lower: &[f64],
    upper: &[f64],
    rng: &mut ChaCha8Rng,
) -> TrajectoryEstimate {
    let d = library.dimension();
    let n = data.n_rows();
    let mut states = Mat::zeros(n, d);
    for i in 0..n {
        for (l, &col) in data.measured_indices().iter().enumerate() {
            *states.at_mut(i, col) = data.values().at(i, l);
        }
    }
    for h in hidden_indices(data, d) {
        for i in 0..n {
            *states.at_mut(i, h) = rng.gen_range(lower[h]..=upper[h]);
        }
    }
    TrajectoryEstimate {
        states,
        params: Mat::zeros(d, library.len()),
    }
}

/// Initialize hidden columns by integrating the finite-difference time
/// derivative of a randomly chosen measured column from a random in-bounds
/// start, redrawing the start (up to a cap) until the whole path stays in
/// bounds.
pub fn init_hidden_from_gradient(
    data: &Dataset,
    library: &FunctionLibrary,
    lower: &[f64],
    upper: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<TrajectoryEstimate> {
    const REDRAW_CAP: usize = 100;
    if data.measured_indices().is_empty() {
        return Err(DahsiError::InvalidData("no measured columns".into()));
    }
    let d = library.dimension();
    let n = data.n_rows();
    let dt = data.dt();
    let mut states = Mat::zeros(n, d);
    for i in 0..n {
        for (l, &col) in data.measured_indices().iter().enumerate() {
            *states.at_mut(i, col) = data.values().at(i, l);
        }
    }
    for h in hidden_indices(data, d) {
        let pick = rng.gen_range(0..data.measured_indices().len());
        let series = data.values().col(pick);
        // central differences inside, one-sided at the ends
        let mut deriv = vec![0.0; n];
        deriv[0] = (series[1] - series[0]) / dt;
        deriv[n - 1] = (series[n - 1] - series[n - 2]) / dt;
        for i in 1..n - 1 {
            deriv[i] = (series[i + 1] - series[i - 1]) / (2.0 * dt);
        }
        let mut path = vec![0.0; n];
        let mut ok = false;
        for _ in 0..REDRAW_CAP {
            path[0] = rng.gen_range(lower[h]..=upper[h]);
            let mut in_bounds = true;
            for i in 0..n - 1 {
                path[i + 1] = path[i] + dt * deriv[i];
                if path[i + 1] < lower[h] || path[i + 1] > upper[h] {
                    in_bounds = false;
                    break;
                }
            }
            if in_bounds {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(DahsiError::RedrawCapExceeded { cap: REDRAW_CAP });
        }
        for i in 0..n {
            *states.at_mut(i, h) = path[i];
        }
    }
    Ok(TrajectoryEstimate {
        states,
        params: Mat::zeros(d, library.len()),
    })
}

/// Zero every parameter with magnitude below `lambda` and drop it from the
/// mask. `lambda = 0` is the identity (strict comparison).
pub fn hard_threshold(params: &Mat, mask: &[bool], lambda: f64) -> (Mat, Vec<bool>) {
    assert!(lambda >= 0.0);
    let mut p = params.clone();
    let mut m = mask.to_vec();
    for (i, v) in p.as_mut_slice().iter_mut().enumerate() {
        if m[i] && v.abs() < lambda {
            *v = 0.0;
            m[i] = false;
        }
    }
    (p, m)
}

/// One full annealing run at a fixed threshold.
#[derive(Debug, Clone)]
pub struct AnnealTrace {
    /// Post-minimization objective value at each annealing step
    /// (`beta_max + 1` entries).
    pub actions: Vec<f64>,
    pub final_estimate: TrajectoryEstimate,
    pub final_model: CandidateModel,
    /// Objective recomputed after the final threshold at the final weight.
    pub final_action: f64,
    pub lambda: f64,
    pub seed: u64,
    pub init: InitStrategy,
}

/// Run the annealing loop once: for each step, minimize the objective at the
/// current weight warm-started from the previous solution, then hard-threshold
/// the parameters. The final structure is the nonzero pattern at the last step.
pub fn anneal_once(
    data: &Dataset,
    library: &Arc<FunctionLibrary>,
    lambda: f64,
    schedule: &AnnealSchedule,
    config: &EngineConfig,
    seed: u64,
) -> Result<AnnealTrace> {
    schedule.validate()?;
    let d = library.dimension();
    let q = library.len();
    let (state_lo, state_hi) = state_bounds(data, d, config.state_margin);

    let mut rng = stream_rng(seed, &[]);
    let mut est = match config.init {
        InitStrategy::Uniform => init_states(data, library, &state_lo, &state_hi, &mut rng),
        InitStrategy::GradientIntegral => {
            init_hidden_from_gradient(data, library, &state_lo, &state_hi, &mut rng)?
        }
    };

    let allowed: Vec<bool> = match &config.allowed {
        Some(a) => {
            assert_eq!(a.len(), d * q, "allowed mask has wrong shape");
            a.clone()
        }
        None => vec![true; d * q],
    };
    let mut mask = allowed;
    let mut actions = Vec::with_capacity(schedule.beta_max + 1);

    for beta in 0..=schedule.beta_max {
        let r_f = schedule.r_f(beta);
        let active = active_from_mask(&mask, q.max(1));
        let mut problem = ActionProblem::new(data, library, active, r_f);
        let n_state = problem.n_states();
        let mut lower = Vec::with_capacity(problem.dim());
        let mut upper = Vec::with_capacity(problem.dim());
        for i in 0..n_state {
            lower.push(state_lo[i % d]);
            upper.push(state_hi[i % d]);
        }
        for _ in 0..problem.active().len() {
            lower.push(-config.param_bound);
            upper.push(config.param_bound);
        }
        let mut settings = MinimizeSettings::new(lower, upper);
        settings.max_iters = config.max_iters;
        settings.g_tol = config.g_tol;
        settings.f_tol = config.f_tol;

        let x0 = problem.pack(&est);
        let minimum = minimize_box(|x, g| problem.eval(x, Some(g)), &x0, &settings).map_err(
            |e| DahsiError::AnnealFailed {
                lambda,
                seed,
                beta,
                source: Box::new(e),
            },
        )?;
        actions.push(minimum.value);
        est = problem.unpack(&minimum.x);

        let (p_next, mask_next) = hard_threshold(&est.params, &mask, lambda);
        est.params = p_next;
        if !config.readmit {
            mask = mask_next;
        }
    }

    let final_model = CandidateModel::from_params(library.clone(), est.params.clone());
    let final_action = action(&est, data, library, schedule.r_f(schedule.beta_max))?.total();
    Ok(AnnealTrace {
        actions,
        final_estimate: est,
        final_model,
        final_action,
        lambda,
        seed,
        init: config.init,
    })
}

/// One deduplicated structure in a sweep pool.
#[derive(Debug, Clone)]
pub struct StructureEntry {
    pub mask: Vec<bool>,
    pub term_count: usize,
    /// Lowest final action seen for this structure.
    pub best_action: f64,
    /// Parameters of the run achieving `best_action`.
    pub best_params: Mat,
    /// Number of runs that ended on this structure.
    pub multiplicity: usize,
}

/// Deduplicated results of a full `(lambda, init)` sweep.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    pub library: Arc<FunctionLibrary>,
    pub runs: usize,
    pub failures: usize,
    pub failure_notes: Vec<String>,
    /// Sorted by ascending best action (mask as tiebreak).
    pub structures: Vec<StructureEntry>,
    /// Every successful run as `(lambda, seed, final term count, matched)`
    /// source material for trend statistics.
    pub run_outcomes: Vec<RunOutcome>,
}

/// Summary of one annealing run inside a sweep.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub lambda: f64,
    pub seed: u64,
    pub term_count: usize,
    pub final_action: f64,
    pub mask: Vec<bool>,
}

impl CandidatePool {
    /// Fraction of all runs whose final structure matches `truth`.
    pub fn recovery_rate(&self, truth: &CandidateModel) -> f64 {
        if self.runs == 0 {
            return 0.0;
        }
        let matching: usize = self
            .structures
            .iter()
            .filter(|s| s.mask == truth.mask())
            .map(|s| s.multiplicity)
            .sum();
        matching as f64 / self.runs as f64
    }

    /// Sweep report artifact.
    pub fn to_json(&self) -> String {
        let structures: Vec<serde_json::Value> = self
            .structures
            .iter()
            .map(|s| {
                let d = self.library.dimension().max(1);
                let q = s.mask.len() / d;
                let mask_rows: Vec<Vec<bool>> =
                    (0..d).map(|k| s.mask[k * q..(k + 1) * q].to_vec()).collect();
                let param_rows: Vec<Vec<f64>> =
                    (0..d).map(|k| s.best_params.row(k).to_vec()).collect();
                serde_json::json!({
                    "mask": mask_rows,
                    "best_action": s.best_action,
                    "multiplicity": s.multiplicity,
                    "term_count": s.term_count,
                    "example_params": param_rows,
                })
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({
            "runs": self.runs,
            "failures": self.failures,
            "structures": structures,
        }))
        .expect("valid json")
    }
}

/// Run `anneal_once` for every (threshold, init-seed) pair and pool the
/// final structures. Individual run failures are recorded, not fatal. The
/// merge is performed in task order, so the pool is identical for any worker
/// count.
pub fn dahsi_sweep(
    data: &Dataset,
    library: &Arc<FunctionLibrary>,
    schedule: &AnnealSchedule,
    n_init: usize,
    base_seed: u64,
    config: &EngineConfig,
) -> Result<CandidatePool> {
    schedule.validate()?;
    if n_init == 0 {
        return Err(DahsiError::InvalidSettings("need at least one initialization".into()));
    }
    let tasks: Vec<(usize, usize)> = (0..schedule.lambdas.len())
        .flat_map(|li| (0..n_init).map(move |ii| (li, ii)))
        .collect();
    let outcomes = run_tasks(tasks, |(li, ii)| {
        let lambda = schedule.lambdas[li];
        let seed = derive_seed(base_seed, &[li as u64, ii as u64]);
        anneal_once(data, library, lambda, schedule, config, seed)
    });

    let mut pool: BTreeMap<Vec<bool>, StructureEntry> = BTreeMap::new();
    let mut failures = 0usize;
    let mut failure_notes = Vec::new();
    let mut run_outcomes = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(trace) => {
                let mask = trace.final_model.mask().to_vec();
                run_outcomes.push(RunOutcome {
                    lambda: trace.lambda,
                    seed: trace.seed,
                    term_count: trace.final_model.term_count(),
                    final_action: trace.final_action,
                    mask: mask.clone(),
                });
                let entry = pool.entry(mask.clone()).or_insert_with(|| StructureEntry {
                    mask,
                    term_count: trace.final_model.term_count(),
                    best_action: f64::INFINITY,
                    best_params: trace.final_model.params().clone(),
                    multiplicity: 0,
                });
                entry.multiplicity += 1;
                if trace.final_action < entry.best_action {
                    entry.best_action = trace.final_action;
                    entry.best_params = trace.final_model.params().clone();
                }
            }
            Err(e) => {
                failures += 1;
                failure_notes.push(e.to_string());
            }
        }
    }
    let mut structures: Vec<StructureEntry> = pool.into_values().collect();
    structures.sort_by(|a, b| {
        a.best_action
            .total_cmp(&b.best_action)
            .then_with(|| a.mask.cmp(&b.mask))
    });
    Ok(CandidatePool {
        library: library.clone(),
        runs: schedule.lambdas.len() * n_init,
        failures,
        failure_notes,
        structures,
        run_outcomes,
    })
}

/// Structures with best action below the cutoff, best first, as models
/// carrying their best-run parameters.
pub fn down_select(pool: &CandidatePool, cutoff: f64) -> Vec<CandidateModel> {
    assert!(cutoff > 0.0);
    pool.structures
        .iter()
        .filter(|s| s.best_action < cutoff)
        .map(|s| CandidateModel::with_mask(pool.library.clone(), s.best_params.clone(), &s.mask))
        .collect()
}

/// Parameter estimation on a frozen structure: one annealing run with zero
/// threshold and the decision vector restricted to the mask, so no new term
/// can activate.
pub fn refit_parameters(
    mask: &[bool],
    data: &Dataset,
    library: &Arc<FunctionLibrary>,
    schedule: &AnnealSchedule,
    config: &EngineConfig,
    seed: u64,
) -> Result<CandidateModel> {
    if mask.iter().all(|&m| !m) {
        return Err(DahsiError::InvalidSettings("cannot refit an empty structure".into()));
    }
    let mut refit_config = config.clone();
    refit_config.allowed = Some(match &config.allowed {
        Some(allowed) => mask
            .iter()
            .zip(allowed)
            .map(|(&m, &a)| m && a)
            .collect(),
        None => mask.to_vec(),
    });
    let trace = anneal_once(data, library, 0.0, schedule, &refit_config, seed)?;
    Ok(trace.final_model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::sim::{add_noise, make_dataset, simulate_rk4};

    fn lorenz_dataset(n: usize, omega: f64, noise_seed: u64) -> (Dataset, Arc<FunctionLibrary>) {
        let preset = presets::lorenz();
        let traj = simulate_rk4(&preset.model, &preset.x0, preset.dt, n).unwrap();
        let noisy = add_noise(&traj, omega, noise_seed);
        let data = make_dataset(&noisy, &[0, 2], preset.dt).unwrap();
        (data, preset.model.library().clone())
    }

    #[test]
    fn schedule_validation() {
        let mut s = AnnealSchedule::default();
        assert!(s.validate().is_ok());
        s.alpha = 1.0;
        assert!(s.validate().is_err());
        s.alpha = 1.1;
        s.lambdas = vec![0.2, 0.2];
        assert!(s.validate().is_err());
    }

    #[test]
    fn linear_and_doubling_grids() {
        let g = lambda_linear_grid(2.5, 0.1, 5.5);
        assert_eq!(g.len(), 31);
        assert!((g[0] - 2.5).abs() < 1e-12 && (g[30] - 5.5).abs() < 1e-12);
        assert_eq!(lambda_doubling_grid(0.5, 4.0), vec![0.5, 1.0, 2.0, 4.0]);
    }

    #[test]
    fn init_states_copies_measured_and_bounds_hidden() {
        let (data, lib) = lorenz_dataset(60, 0.0, 0);
        let (lo, hi) = state_bounds(&data, 3, 2.0);
        let mut rng = stream_rng(5, &[]);
        let est = init_states(&data, &lib, &lo, &hi, &mut rng);
        for i in 0..data.n_rows() {
            assert_eq!(est.states.at(i, 0), data.values().at(i, 0));
            assert_eq!(est.states.at(i, 2), data.values().at(i, 1));
            let y = est.states.at(i, 1);
            assert!(y >= lo[1] && y <= hi[1]);
        }
        assert!(est.params.iter().all(|p| p == 0.0));

        // all measured: no randomness consumed, states equal the data
        let traj = simulate_rk4(&presets::lorenz().model, &[1.0, 1.0, 1.0], 0.01, 30).unwrap();
        let full = make_dataset(&traj, &[0, 1, 2], 0.01).unwrap();
        let mut rng_a = stream_rng(5, &[]);
        let est_full = init_states(&full, &lib, &lo, &hi, &mut rng_a);
        assert_eq!(est_full.states.as_slice(), traj.as_slice());
        let consumed_a: f64 = rng_a.gen();
        let consumed_b: f64 = stream_rng(5, &[]).gen();
        assert_eq!(consumed_a, consumed_b);
    }

    #[test]
    fn init_states_is_reproducible() {
        let (data, lib) = lorenz_dataset(60, 0.0, 0);
        let (lo, hi) = state_bounds(&data, 3, 2.0);
        let a = init_states(&data, &lib, &lo, &hi, &mut stream_rng(9, &[]));
        let b = init_states(&data, &lib, &lo, &hi, &mut stream_rng(9, &[]));
        assert_eq!(a.states.as_slice(), b.states.as_slice());
    }

    #[test]
    fn hidden_draws_stay_in_bounds() {
        let (data, lib) = lorenz_dataset(40, 0.0, 0);
        let lo = vec![-20.0, -20.0, -20.0];
        let hi = vec![20.0, 20.0, 20.0];
        // many draws, all inside the requested box
        for seed in 0..250 {
            let est = init_states(&data, &lib, &lo, &hi, &mut stream_rng(seed, &[]));
            for i in 0..data.n_rows() {
                let y = est.states.at(i, 1);
                assert!((-20.0..=20.0).contains(&y));
            }
        }
    }

    #[test]
    fn gradient_init_constant_series_stays_at_draw() {
        // constant measured series: derivative is zero, so the hidden path
        // stays at its initial draw
        let mut values = Mat::zeros(20, 1);
        for i in 0..20 {
            *values.at_mut(i, 0) = 4.2;
        }
        let data = Dataset::new(values, vec![0], 0.1).unwrap();
        let lib = Arc::new(crate::library::build_monomial_library(2, 1));
        let lo = vec![-1.0, -1.0];
        let hi = vec![1.0, 1.0];
        let est = init_hidden_from_gradient(&data, &lib, &lo, &hi, &mut stream_rng(3, &[]))
            .unwrap();
        let first = est.states.at(0, 1);
        for i in 0..20 {
            assert_eq!(est.states.at(i, 1), first);
        }
        // determinism
        let est2 = init_hidden_from_gradient(&data, &lib, &lo, &hi, &mut stream_rng(3, &[]))
            .unwrap();
        assert_eq!(est.states.as_slice(), est2.states.as_slice());
    }

    #[test]
    fn hard_threshold_examples() {
        let p = Mat::from_vec(1, 3, vec![3.8, -0.05, 0.2]);
        let mask = vec![true, true, true];
        let (p0, m0) = hard_threshold(&p, &mask, 0.0);
        assert_eq!(p0.as_slice(), p.as_slice());
        assert_eq!(m0, mask);
        let (p1, m1) = hard_threshold(&p, &mask, 0.1);
        assert_eq!(p1.as_slice(), &[3.8, 0.0, 0.2]);
        assert_eq!(m1, vec![true, false, true]);
    }
}
