//! Damped Gauss-Newton on least-squares objectives whose normal equations
//! have arrowhead sparsity: block-tridiagonal over per-time-point state
//! blocks plus a small dense parameter corner, coupled through a tall block
//! column. One solve costs O(N (d^3 + d^2 p + d p^2) + p^3).

use crate::error::DahsiError;
use crate::optimize::{Minimum, Status};
use crate::Result;

/// Assembled normal equations `H` and gradient `g` at a point.
///
/// Variable layout matches the action's decision vector: `n_blocks` state
/// blocks of size `d`, then `p` parameter entries.
pub struct ArrowheadNormal {
    pub n_blocks: usize,
    pub d: usize,
    pub p: usize,
    /// Diagonal blocks `H[x_i, x_i]`, each `d x d` row-major.
    pub diag: Vec<f64>,
    /// Sub-diagonal blocks `H[x_{i+1}, x_i]`, each `d x d`.
    pub off: Vec<f64>,
    /// State-parameter coupling `H[x_i, p]`, `n_blocks` blocks of `d x p`.
    pub coupling: Vec<f64>,
    /// Dense parameter corner `H[p, p]`.
    pub corner: Vec<f64>,
    /// Gradient, length `n_blocks * d + p`.
    pub grad: Vec<f64>,
}

impl ArrowheadNormal {
    pub fn new(n_blocks: usize, d: usize, p: usize) -> Self {
        Self {
            n_blocks,
            d,
            p,
            diag: vec![0.0; n_blocks * d * d],
            off: vec![0.0; n_blocks.saturating_sub(1) * d * d],
            coupling: vec![0.0; n_blocks * d * p],
            corner: vec![0.0; p * p],
            grad: vec![0.0; n_blocks * d + p],
        }
    }

    pub fn clear(&mut self) {
        for v in self.diag.iter_mut() {
            *v = 0.0;
        }
        for v in self.off.iter_mut() {
            *v = 0.0;
        }
        for v in self.coupling.iter_mut() {
            *v = 0.0;
        }
        for v in self.corner.iter_mut() {
            *v = 0.0;
        }
        for v in self.grad.iter_mut() {
            *v = 0.0;
        }
    }

    /// Solve `(H + mu * D_H) step = -grad` with `D_H` the absolute diagonal
    /// of `H` (floored), via block elimination. `None` if a pivot is not
    /// positive definite at this damping.
    pub fn solve(&self, mu: f64, step: &mut [f64]) -> Option<()> {
        let (n, d, p) = (self.n_blocks, self.d, self.p);
        let nd = n * d;
        debug_assert_eq!(step.len(), nd + p);

        let mut t_diag = self.diag.clone();
        for i in 0..n {
            for k in 0..d {
                let idx = i * d * d + k * d + k;
                t_diag[idx] += mu * self.diag[idx].abs().max(1e-12);
            }
        }

        let factors = factor_block_tridiag(&t_diag, &self.off, n, d)?;

        // right-hand sides: the p coupling columns and the state gradient
        let nrhs = p + 1;
        let mut rhs = vec![0.0; nd * nrhs];
        for i in 0..n {
            for k in 0..d {
                let row = i * d + k;
                for j in 0..p {
                    rhs[row * nrhs + j] = self.coupling[i * d * p + k * p + j];
                }
                rhs[row * nrhs + p] = self.grad[row];
            }
        }
        solve_block_tridiag(&factors, &mut rhs, nrhs);

        // Schur complement on the corner: S = C - B^T Z, rhs_S = B^T u - g_p
        let mut dp = vec![0.0; p];
        if p > 0 {
            let mut s = self.corner.clone();
            for k in 0..p {
                s[k * p + k] += mu * self.corner[k * p + k].abs().max(1e-12);
            }
            let mut s_rhs = vec![0.0; p];
            for j in 0..p {
                s_rhs[j] = -self.grad[nd + j];
            }
            for row in 0..nd {
                let (i, k) = (row / d, row % d);
                let b_row = &self.coupling[i * d * p + k * p..i * d * p + (k + 1) * p];
                let z_row = &rhs[row * nrhs..row * nrhs + p];
                let u_row = rhs[row * nrhs + p];
                for a in 0..p {
                    let ba = b_row[a];
                    if ba == 0.0 {
                        continue;
                    }
                    for (c, &z) in z_row.iter().enumerate() {
                        s[a * p + c] -= ba * z;
                    }
                    s_rhs[a] += ba * u_row;
                }
            }
            let chol = dense_cholesky(&mut s, p)?;
            dense_chol_solve(&chol, p, &mut s_rhs);
            dp.copy_from_slice(&s_rhs);
        }

        // dx = -(u + Z dp)
        for row in 0..nd {
            let z_row = &rhs[row * nrhs..row * nrhs + p];
            let mut acc = rhs[row * nrhs + p];
            for (j, &z) in z_row.iter().enumerate() {
                acc += z * dp[j];
            }
            step[row] = -acc;
        }
        step[nd..].copy_from_slice(&dp);
        Some(())
    }
}

struct TridiagFactors {
    n: usize,
    d: usize,
    /// Lower Cholesky factor of each pivot block.
    chol_diag: Vec<f64>,
    /// Elimination factors `L_{i+1,i} = O_i * L_ii^{-T}`.
    chol_off: Vec<f64>,
}

fn factor_block_tridiag(
    t_diag: &[f64],
    off: &[f64],
    n: usize,
    d: usize,
) -> Option<TridiagFactors> {
    let mut chol_diag = vec![0.0; n * d * d];
    let mut chol_off = vec![0.0; n.saturating_sub(1) * d * d];
    let mut block = vec![0.0; d * d];
    for i in 0..n {
        block.copy_from_slice(&t_diag[i * d * d..(i + 1) * d * d]);
        if i > 0 {
            // w = O_{i-1} * L_{i-1}^{-T}; subtract w w^T from the pivot
            let prev = &chol_diag[(i - 1) * d * d..i * d * d];
            let o = &off[(i - 1) * d * d..i * d * d];
            let w = &mut chol_off[(i - 1) * d * d..i * d * d];
            for r in 0..d {
                for c in 0..d {
                    let mut acc = o[r * d + c];
                    for k in 0..c {
                        acc -= w[r * d + k] * prev[c * d + k];
                    }
                    w[r * d + c] = acc / prev[c * d + c];
                }
            }
            for r in 0..d {
                for c in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += w[r * d + k] * w[c * d + k];
                    }
                    block[r * d + c] -= acc;
                }
            }
        }
        let target = &mut chol_diag[i * d * d..(i + 1) * d * d];
        target.copy_from_slice(&block);
        if dense_cholesky_in_place(target, d).is_none() {
            return None;
        }
    }
    Some(TridiagFactors {
        n,
        d,
        chol_diag,
        chol_off,
    })
}

/// In-place forward + backward substitution for `nrhs` stacked right-hand
/// sides (row-major `(n*d) x nrhs`).
fn solve_block_tridiag(f: &TridiagFactors, rhs: &mut [f64], nrhs: usize) {
    let (n, d) = (f.n, f.d);
    // forward: z_i = L_ii^{-1} (b_i - L_{i,i-1} z_{i-1})
    for i in 0..n {
        if i > 0 {
            let w = &f.chol_off[(i - 1) * d * d..i * d * d];
            for r in 0..d {
                for j in 0..nrhs {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += w[r * d + k] * rhs[((i - 1) * d + k) * nrhs + j];
                    }
                    rhs[(i * d + r) * nrhs + j] -= acc;
                }
            }
        }
        let l = &f.chol_diag[i * d * d..(i + 1) * d * d];
        for r in 0..d {
            for j in 0..nrhs {
                let mut acc = rhs[(i * d + r) * nrhs + j];
                for k in 0..r {
                    acc -= l[r * d + k] * rhs[(i * d + k) * nrhs + j];
                }
                rhs[(i * d + r) * nrhs + j] = acc / l[r * d + r];
            }
        }
    }
    // backward: x_i = L_ii^{-T} (z_i - L_{i+1,i}^T x_{i+1})
    for i in (0..n).rev() {
        if i + 1 < n {
            let w = &f.chol_off[i * d * d..(i + 1) * d * d];
            for r in 0..d {
                for j in 0..nrhs {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += w[k * d + r] * rhs[((i + 1) * d + k) * nrhs + j];
                    }
                    rhs[(i * d + r) * nrhs + j] -= acc;
                }
            }
        }
        let l = &f.chol_diag[i * d * d..(i + 1) * d * d];
        for r in (0..d).rev() {
            for j in 0..nrhs {
                let mut acc = rhs[(i * d + r) * nrhs + j];
                for k in r + 1..d {
                    acc -= l[k * d + r] * rhs[(i * d + k) * nrhs + j];
                }
                rhs[(i * d + r) * nrhs + j] = acc / l[r * d + r];
            }
        }
    }
}

fn dense_cholesky_in_place(a: &mut [f64], n: usize) -> Option<()> {
    for r in 0..n {
        for c in 0..=r {
            let mut acc = a[r * n + c];
            for k in 0..c {
                acc -= a[r * n + k] * a[c * n + k];
            }
            if r == c {
                if acc <= 0.0 || !acc.is_finite() {
                    return None;
                }
                a[r * n + c] = acc.sqrt();
            } else {
                a[r * n + c] = acc / a[c * n + c];
            }
        }
    }
    Some(())
}

fn dense_cholesky(a: &mut [f64], n: usize) -> Option<Vec<f64>> {
    dense_cholesky_in_place(a, n)?;
    Some(a.to_vec())
}

fn dense_chol_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for r in 0..n {
        let mut acc = b[r];
        for k in 0..r {
            acc -= l[r * n + k] * b[k];
        }
        b[r] = acc / l[r * n + r];
    }
    for r in (0..n).rev() {
        let mut acc = b[r];
        for k in r + 1..n {
            acc -= l[k * n + r] * b[k];
        }
        b[r] = acc / l[r * n + r];
    }
}

/// A least-squares objective that can assemble its Gauss-Newton system.
pub trait ArrowheadLeastSquares {
    fn n_blocks(&self) -> usize;
    fn block_dim(&self) -> usize;
    fn n_corner(&self) -> usize;
    /// Objective value at `x`.
    fn value(&mut self, x: &[f64]) -> f64;
    /// Assemble normal equations and gradient at `x`; returns the value.
    fn assemble(&mut self, x: &[f64], sys: &mut ArrowheadNormal) -> f64;
}

#[derive(Debug, Clone)]
pub struct GaussNewtonSettings {
    pub max_iters: usize,
    /// Relative objective-decrease tolerance.
    pub f_tol: f64,
    /// Projected-gradient tolerance.
    pub g_tol: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl GaussNewtonSettings {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self {
            max_iters: 200,
            f_tol: 1e-12,
            g_tol: 1e-8,
            lower,
            upper,
        }
    }
}

/// Levenberg-Marquardt driver: damped Gauss-Newton steps projected onto the
/// box, with the damping raised on rejection and relaxed on acceptance.
/// Deterministic for identical inputs.
pub fn minimize_box_gauss_newton<P: ArrowheadLeastSquares>(
    problem: &mut P,
    x0: &[f64],
    settings: &GaussNewtonSettings,
) -> Result<Minimum> {
    let dim = x0.len();
    let (n, d, p) = (problem.n_blocks(), problem.block_dim(), problem.n_corner());
    assert_eq!(dim, n * d + p);
    if settings.lower.len() != dim || settings.upper.len() != dim {
        return Err(DahsiError::InvalidSettings("bounds length mismatch".into()));
    }

    let mut x = x0.to_vec();
    for i in 0..dim {
        x[i] = x[i].max(settings.lower[i]).min(settings.upper[i]);
    }
    let mut sys = ArrowheadNormal::new(n, d, p);
    let mut fx = problem.value(&x);
    let mut n_evals = 1usize;
    if !fx.is_finite() {
        return Err(DahsiError::NonFiniteStart);
    }

    let mut mu = 1e-3;
    let mut step = vec![0.0; dim];
    let mut x_trial = vec![0.0; dim];
    let mut stall = 0usize;
    let mut iter = 0usize;
    while iter < settings.max_iters {
        sys.clear();
        let f_here = problem.assemble(&x, &mut sys);
        n_evals += 1;
        fx = f_here;

        // projected-gradient optimality over the box
        let mut pg = 0.0f64;
        for i in 0..dim {
            let z = (x[i] - sys.grad[i]).max(settings.lower[i]).min(settings.upper[i]);
            pg = pg.max((z - x[i]).abs());
        }
        if pg <= settings.g_tol {
            return Ok(Minimum {
                x,
                value: fx,
                status: Status::ConvergedGradient,
                iterations: iter,
                n_evals,
            });
        }

        // inner damping loop: escalate until a step is accepted
        let mut accepted = false;
        for _ in 0..40 {
            if sys.solve(mu, &mut step).is_none() {
                mu *= 10.0;
                continue;
            }
            for i in 0..dim {
                x_trial[i] = (x[i] + step[i]).max(settings.lower[i]).min(settings.upper[i]);
            }
            let f_trial = problem.value(&x_trial);
            n_evals += 1;
            if f_trial.is_finite() && f_trial < fx {
                let decrease = fx - f_trial;
                x.copy_from_slice(&x_trial);
                fx = f_trial;
                mu = (mu / 3.0).max(1e-12);
                accepted = true;
                if decrease <= settings.f_tol * (1.0 + fx.abs()) {
                    stall += 1;
                } else {
                    stall = 0;
                }
                break;
            }
            mu *= 10.0;
            if mu > 1e14 {
                break;
            }
        }
        iter += 1;
        if !accepted {
            return Ok(Minimum {
                x,
                value: fx,
                status: Status::ConvergedProgress,
                iterations: iter,
                n_evals,
            });
        }
        if stall >= 2 {
            return Ok(Minimum {
                x,
                value: fx,
                status: Status::ConvergedProgress,
                iterations: iter,
                n_evals,
            });
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
