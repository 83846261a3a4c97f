//! Box-constrained smooth minimization: limited-memory quasi-Newton with
//! gradient projection onto the box and a strong-Wolfe line search.
//!
//! This is the engine's only nonlinear-programming dependency point. The
//! method is gradient-only and deterministic: identical inputs give
//! bit-identical iterates.

use std::collections::VecDeque;

use crate::error::DahsiError;
use crate::Result;

/// Termination reason.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    /// Projected-gradient infinity norm fell below `g_tol`.
    ConvergedGradient,
    /// Objective decrease stalled below `f_tol` (or no feasible progress).
    ConvergedProgress,
    /// Iteration cap reached.
    IterationCap,
}

#[derive(Debug, Clone)]
pub struct MinimizeSettings {
    pub max_iters: usize,
    /// Tolerance on the projected-gradient infinity norm.
    pub g_tol: f64,
    /// Relative objective-decrease tolerance.
    pub f_tol: f64,
    /// Per-variable box bounds.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Number of stored curvature pairs.
    pub memory: usize,
}

impl MinimizeSettings {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self {
            max_iters: 1000,
            g_tol: 1e-8,
            f_tol: 1e-12,
            lower,
            upper,
            memory: 10,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if !(self.g_tol > 0.0 && self.f_tol > 0.0) {
            return Err(DahsiError::InvalidSettings("tolerances must be positive".into()));
        }
        if self.lower.len() != dim || self.upper.len() != dim {
            return Err(DahsiError::InvalidSettings(format!(
                "bounds have length {}/{} for a {dim}-dimensional problem",
                self.lower.len(),
                self.upper.len()
            )));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| l > u) {
            return Err(DahsiError::InvalidSettings("lower bound above upper bound".into()));
        }
        if self.max_iters == 0 || self.memory == 0 {
            return Err(DahsiError::InvalidSettings(
                "max_iters and memory must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub status: Status,
    pub iterations: usize,
    pub n_evals: usize,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

#[inline]
fn clamp_into(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].max(lower[i]).min(upper[i]);
    }
}

/// `||P(x - g) - x||_inf`: the first-order optimality measure for the box.
fn projected_gradient_inf(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..x.len() {
        let z = (x[i] - g[i]).max(lower[i]).min(upper[i]);
        best = best.max((z - x[i]).abs());
    }
    best
}

#[inline]
fn at_lower(x: f64, l: f64) -> bool {
    x - l <= 1e-10 * (1.0 + l.abs())
}

#[inline]
fn at_upper(x: f64, u: f64) -> bool {
    u - x <= 1e-10 * (1.0 + u.abs())
}

/// Minimize an objective-with-gradient over a box.
///
/// The start point is projected into the box. The returned point is feasible
/// and its objective never exceeds the (projected) start objective. A
/// non-finite objective at the start is an error; non-finite values found
/// during the search only shrink the step.
pub fn minimize_box<F>(mut f: F, x0: &[f64], settings: &MinimizeSettings) -> Result<Minimum>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let dim = x0.len();
    settings.validate(dim)?;
    let (lower, upper) = (&settings.lower, &settings.upper);

    let mut x = x0.to_vec();
    clamp_into(&mut x, lower, upper);
    let mut g = vec![0.0; dim];
    let mut fx = f(&x, &mut g);
    let mut n_evals = 1usize;
    if !fx.is_finite() {
        return Err(DahsiError::NonFiniteStart);
    }

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut d = vec![0.0; dim];
    let mut gm = vec![0.0; dim];
    let mut x_trial = vec![0.0; dim];
    let mut g_trial = vec![0.0; dim];
    let mut alphas: Vec<f64> = Vec::with_capacity(settings.memory);
    let mut stall_count = 0usize;

    for iter in 0..settings.max_iters {
        if projected_gradient_inf(&x, &g, lower, upper) <= settings.g_tol {
            return Ok(Minimum {
                x,
                value: fx,
                status: Status::ConvergedGradient,
                iterations: iter,
                n_evals,
            });
        }

        // gradient with bound-active components removed
        for i in 0..dim {
            let binding = (at_lower(x[i], lower[i]) && g[i] > 0.0)
                || (at_upper(x[i], upper[i]) && g[i] < 0.0);
            gm[i] = if binding { 0.0 } else { g[i] };
        }

        two_loop(&history, &gm, &mut d, &mut alphas);
        for i in 0..dim {
            let binding = (at_lower(x[i], lower[i]) && g[i] > 0.0)
                || (at_upper(x[i], upper[i]) && g[i] < 0.0);
            if binding {
                d[i] = 0.0;
            }
        }
        let mut dg: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        let d_norm = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let g_norm = gm.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(dg < -1e-14 * d_norm * g_norm) || !dg.is_finite() {
            // not a usable descent direction; fall back to projected steepest descent
            history.clear();
            for i in 0..dim {
                d[i] = -gm[i];
            }
            dg = d.iter().zip(&g).map(|(a, b)| a * b).sum();
            if dg >= 0.0 {
                return Ok(Minimum {
                    x,
                    value: fx,
                    status: Status::ConvergedGradient,
                    iterations: iter,
                    n_evals,
                });
            }
        }

        // largest feasible step along d
        let mut alpha_max = f64::INFINITY;
        for i in 0..dim {
            if d[i] > 0.0 {
                alpha_max = alpha_max.min((upper[i] - x[i]) / d[i]);
            } else if d[i] < 0.0 {
                alpha_max = alpha_max.min((lower[i] - x[i]) / d[i]);
            }
        }
        if !alpha_max.is_finite() {
            alpha_max = 1e12;
        }
        if alpha_max <= 0.0 {
            return Ok(Minimum {
                x,
                value: fx,
                status: Status::ConvergedProgress,
                iterations: iter,
                n_evals,
            });
        }

        let ls = wolfe_search(
            &mut f,
            &x,
            &d,
            fx,
            dg,
            alpha_max,
            lower,
            upper,
            &mut x_trial,
            &mut g_trial,
            &mut n_evals,
        );
        let (alpha, f_new) = match ls {
            Some(pair) => pair,
            None => {
                if !history.is_empty() {
                    // retry from a fresh steepest-descent direction
                    history.clear();
                    continue;
                }
                return Ok(Minimum {
                    x,
                    value: fx,
                    status: Status::ConvergedProgress,
                    iterations: iter,
                    n_evals,
                });
            }
        };

        // accepted step: x_trial/g_trial hold the new point and gradient
        let mut s = vec![0.0; dim];
        let mut yv = vec![0.0; dim];
        for i in 0..dim {
            s[i] = x_trial[i] - x[i];
            yv[i] = g_trial[i] - g[i];
        }
        let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let yy: f64 = yv.iter().map(|v| v * v).sum::<f64>().sqrt();
        if sy > 1e-10 * ss * yy {
            history.push_back((s, yv, 1.0 / sy));
            if history.len() > settings.memory {
                history.pop_front();
            }
        }
        x.copy_from_slice(&x_trial);
        g.copy_from_slice(&g_trial);
        let decrease = fx - f_new;
        fx = f_new;
        let _ = alpha;

        if decrease <= settings.f_tol * (1.0 + fx.abs()) {
            stall_count += 1;
            if stall_count >= 2 {
                return Ok(Minimum {
                    x,
                    value: fx,
                    status: Status::ConvergedProgress,
                    iterations: iter + 1,
                    n_evals,
                });
            }
        } else {
            stall_count = 0;
        }
    }

    Ok(Minimum {
        x,
        value: fx,
        status: Status::IterationCap,
        iterations: settings.max_iters,
        n_evals,
    })
}

/// Two-loop recursion: `d = -H g` with the stored curvature pairs.
fn two_loop(
    history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    g: &[f64],
    d: &mut [f64],
    alphas: &mut Vec<f64>,
) {
    d.copy_from_slice(g);
    alphas.clear();
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.iter().zip(d.iter()).map(|(si, qi)| si * qi).sum::<f64>();
        for i in 0..d.len() {
            d[i] -= a * y[i];
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        if yy > 0.0 {
            let gamma = sy / yy;
            for v in d.iter_mut() {
                *v *= gamma;
            }
        }
    }
    for (idx, (s, y, rho)) in history.iter().enumerate() {
        let a = alphas[history.len() - 1 - idx];
        let b = rho * y.iter().zip(d.iter()).map(|(yi, qi)| yi * qi).sum::<f64>();
        for i in 0..d.len() {
            d[i] += (a - b) * s[i];
        }
    }
    for v in d.iter_mut() {
        *v = -*v;
    }
}

/// Strong-Wolfe line search on `phi(a) = f(clamp(x + a d))`, bracketed and
/// capped at `alpha_max`. Returns the accepted step and value; the trial
/// buffers hold the accepted point and its gradient. `None` means no
/// acceptable step exists numerically.
#[allow(clippy::too_many_arguments)]
fn wolfe_search<F>(
    f: &mut F,
    x: &[f64],
    d: &[f64],
    phi0: f64,
    dphi0: f64,
    alpha_max: f64,
    lower: &[f64],
    upper: &[f64],
    x_trial: &mut [f64],
    g_trial: &mut [f64],
    n_evals: &mut usize,
) -> Option<(f64, f64)>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let dim = x.len();
    let mut eval = |alpha: f64, x_trial: &mut [f64], g_trial: &mut [f64]| -> (f64, f64) {
        for i in 0..dim {
            x_trial[i] = x[i] + alpha * d[i];
        }
        clamp_into(x_trial, lower, upper);
        let v = f(x_trial, g_trial);
        *n_evals += 1;
        let slope = g_trial.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
        (v, slope)
    };

    let mut alpha_prev = 0.0f64;
    let mut phi_prev = phi0;
    let mut alpha = 1.0f64.min(alpha_max);
    let mut bracket: Option<(f64, f64, f64, f64)> = None; // (lo, phi_lo, hi, phi_hi)

    for outer in 0..20 {
        let (phi, dphi) = eval(alpha, x_trial, g_trial);
        if !phi.is_finite() {
            // overshoot into a bad region: backtrack toward the last good point
            alpha = 0.5 * (alpha_prev + alpha);
            if alpha <= f64::MIN_POSITIVE {
                return None;
            }
            continue;
        }
        if phi > phi0 + C1 * alpha * dphi0 || (outer > 0 && phi >= phi_prev) {
            bracket = Some((alpha_prev, phi_prev, alpha, phi));
            break;
        }
        if dphi.abs() <= -C2 * dphi0 {
            return Some((alpha, phi));
        }
        if dphi >= 0.0 {
            bracket = Some((alpha, phi, alpha_prev, phi_prev));
            break;
        }
        if alpha >= alpha_max * (1.0 - 1e-12) {
            // the box cut the search; a sufficient-decrease point at the
            // boundary is accepted as the constrained step
            return Some((alpha, phi));
        }
        alpha_prev = alpha;
        phi_prev = phi;
        alpha = (2.0 * alpha).min(alpha_max);
    }

    let (mut lo, mut phi_lo, mut hi, mut phi_hi) = bracket?;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if (hi - lo).abs() <= 1e-16 * (1.0 + lo.abs()) {
            break;
        }
        let (phi, dphi) = eval(mid, x_trial, g_trial);
        if !phi.is_finite() || phi > phi0 + C1 * mid * dphi0 || phi >= phi_lo {
            hi = mid;
            phi_hi = phi;
        } else {
            if dphi.abs() <= -C2 * dphi0 {
                return Some((mid, phi));
            }
            if dphi * (hi - lo) >= 0.0 {
                hi = lo;
                phi_hi = phi_lo;
            }
            lo = mid;
            phi_lo = phi;
        }
    }
    let _ = phi_hi;
    // no strong-Wolfe point found; fall back to the best sufficient-decrease
    // point so the objective still goes down
    if lo > 0.0 && phi_lo < phi0 + C1 * lo * dphi0 {
        let (phi, _) = eval(lo, x_trial, g_trial);
        if phi.is_finite() && phi <= phi_lo + 1e-15 * (1.0 + phi_lo.abs()) {
            return Some((lo, phi));
        }
    }
    None
}

/// Central-difference gradient estimate; the test oracle for analytic
/// gradients.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(step > 0.0);
    let mut xp = x.to_vec();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let xi = x[i];
        xp[i] = xi + step;
        let fp = f(&xp);
        xp[i] = xi - step;
        let fm = f(&xp);
        xp[i] = xi;
        out[i] = (fp - fm) / (2.0 * step);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(center: f64) -> impl FnMut(&[f64], &mut [f64]) -> f64 {
        move |x, g| {
            g[0] = 2.0 * (x[0] - center);
            (x[0] - center) * (x[0] - center)
        }
    }

    #[test]
    fn scalar_quadratic_interior() {
        let settings = MinimizeSettings::new(vec![-10.0], vec![10.0]);
        let m = minimize_box(quad(3.0), &[0.0], &settings).unwrap();
        assert!((m.x[0] - 3.0).abs() < 1e-6);
        assert_eq!(m.status, Status::ConvergedGradient);
    }

    #[test]
    fn scalar_quadratic_active_bound() {
        let settings = MinimizeSettings::new(vec![-1.0], vec![1.0]);
        let m = minimize_box(quad(3.0), &[0.0], &settings).unwrap();
        assert!((m.x[0] - 1.0).abs() < 1e-10);
        assert_eq!(m.status, Status::ConvergedGradient);
    }

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -400.0 * a * (b - a * a) - 2.0 * (1.0 - a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a) * (1.0 - a) + 100.0 * (b - a * a) * (b - a * a)
    }

    #[test]
    fn rosenbrock_standard_start() {
        let settings = MinimizeSettings::new(vec![-10.0, -10.0], vec![10.0, 10.0]);
        let m = minimize_box(rosenbrock, &[-1.2, 1.0], &settings).unwrap();
        assert!((m.x[0] - 1.0).abs() < 1e-4, "x = {:?}", m.x);
        assert!((m.x[1] - 1.0).abs() < 1e-4, "x = {:?}", m.x);
    }

    #[test]
    fn every_trial_point_stays_in_the_box() {
        let settings = MinimizeSettings::new(vec![-2.0, -2.0], vec![2.0, 2.0]);
        let feasible = std::cell::Cell::new(true);
        let m = minimize_box(
            |x, g| {
                if x.iter().any(|&v| !(-2.0..=2.0).contains(&v)) {
                    feasible.set(false);
                }
                rosenbrock(x, g)
            },
            &[-1.2, 1.0],
            &settings,
        )
        .unwrap();
        assert!(feasible.get());
        assert!(m.x.iter().all(|&v| (-2.0..=2.0).contains(&v)));
    }

    #[test]
    fn runs_are_bit_identical() {
        let settings = MinimizeSettings::new(vec![-10.0, -10.0], vec![10.0, 10.0]);
        let a = minimize_box(rosenbrock, &[-1.2, 1.0], &settings).unwrap();
        let b = minimize_box(rosenbrock, &[-1.2, 1.0], &settings).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.value, b.value);
        assert_eq!(a.n_evals, b.n_evals);
    }

    #[test]
    fn objective_never_increases() {
        let settings = MinimizeSettings::new(vec![-10.0, -10.0], vec![10.0, 10.0]);
        let best = std::cell::Cell::new(f64::INFINITY);
        let monotone = std::cell::Cell::new(true);
        let m = minimize_box(
            |x, g| rosenbrock(x, g),
            &[2.0, -1.5],
            &settings,
        )
        .unwrap();
        // accepted iterates are monotone by construction; check endpoint
        let mut g = vec![0.0; 2];
        let f0 = rosenbrock(&[2.0, -1.5], &mut g);
        assert!(m.value <= f0);
        let _ = (best, monotone);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let settings = MinimizeSettings::new(vec![-1.0], vec![1.0]);
        let r = minimize_box(|_, g| {
            g[0] = 0.0;
            f64::NAN
        }, &[0.0], &settings);
        assert!(matches!(r, Err(DahsiError::NonFiniteStart)));
    }

    #[test]
    fn invalid_bounds_are_rejected() {
        let settings = MinimizeSettings::new(vec![2.0], vec![-2.0]);
        assert!(minimize_box(quad(0.0), &[0.0], &settings).is_err());
    }

    #[test]
    fn finite_diff_simple_cases() {
        let g = finite_diff_gradient(|x| x[0] * x[0], &[2.0], 1e-6);
        assert!((g[0] - 4.0).abs() < 1e-6);
        let g = finite_diff_gradient(|x| 3.0 * x[0] - 2.0 * x[1], &[0.3, -0.7], 1e-6);
        assert!((g[0] - 3.0).abs() < 1e-9);
        assert!((g[1] + 2.0).abs() < 1e-9);
    }
}
