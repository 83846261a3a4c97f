//! The annealed objective: measurement error plus weighted collocation
//! model error over the stacked (states, active parameters) decision vector,
//! with its analytic gradient.

use crate::data::Dataset;
use crate::error::DahsiError;
use crate::library::FunctionLibrary;
use crate::mat::Mat;
use crate::model::rhs_from_basis;
use crate::Result;

/// Full state path estimate paired with a dense parameter matrix.
#[derive(Debug, Clone)]
pub struct TrajectoryEstimate {
    /// N x D estimated states.
    pub states: Mat,
    /// D x q parameters.
    pub params: Mat,
}

/// The two parts of the objective and the model-error weight.
#[derive(Debug, Clone, Copy)]
pub struct ActionValue {
    pub measurement: f64,
    pub model: f64,
    pub weight: f64,
}

impl ActionValue {
    pub fn total(&self) -> f64 {
        self.measurement + self.weight * self.model
    }
}

/// Mean squared mismatch between the estimated measured states and the data:
/// `(1/N) sum_i sum_{l in measured} (X_{i,l} - Y_{i,l})^2`. Hidden columns
/// contribute nothing.
pub fn measurement_error(states: &Mat, data: &Dataset) -> Result<f64> {
    if states.rows() != data.n_rows() {
        return Err(DahsiError::InvalidData(format!(
            "estimate has {} rows, data has {}",
            states.rows(),
            data.n_rows()
        )));
    }
    let n = data.n_rows();
    let mut acc = 0.0;
    for i in 0..n {
        let row = states.row(i);
        let y = data.values().row(i);
        for (l, &col) in data.measured_indices().iter().enumerate() {
            let diff = row[col] - y[l];
            acc += diff * diff;
        }
    }
    Ok(acc / n as f64)
}

/// One step of the Hermite-Simpson map with the midpoint eliminated:
/// `f = X_i + (dt/6) (F(X_i) + 4 F(X_m) + F(X_next))` where
/// `X_m = (X_i + X_next)/2 + (dt/8)(F(X_i) - F(X_next))`.
///
/// The model-error residual for the interval is `X_next - f`; note the map
/// depends on both endpoints.
pub fn hermite_simpson_map(
    library: &FunctionLibrary,
    params: &Mat,
    x_i: &[f64],
    x_next: &[f64],
    dt: f64,
) -> Vec<f64> {
    let d = library.dimension();
    let q = library.len();
    let mut basis = vec![0.0; q];
    let mut f_a = vec![0.0; d];
    let mut f_b = vec![0.0; d];
    let mut f_m = vec![0.0; d];
    let mut x_m = vec![0.0; d];

    library.eval_basis_into(x_i, &mut basis);
    rhs_from_basis(params, &basis, &mut f_a);
    library.eval_basis_into(x_next, &mut basis);
    rhs_from_basis(params, &basis, &mut f_b);
    for k in 0..d {
        x_m[k] = 0.5 * (x_i[k] + x_next[k]) + dt / 8.0 * (f_a[k] - f_b[k]);
    }
    library.eval_basis_into(&x_m, &mut basis);
    rhs_from_basis(params, &basis, &mut f_m);

    (0..d)
        .map(|k| x_i[k] + dt / 6.0 * (f_a[k] + 4.0 * f_m[k] + f_b[k]))
        .collect()
}

/// Mean squared collocation residual:
/// `(1/N) sum_{i=1}^{N-1} ||X_{i+1} - f(X_i, X_{i+1})||^2`.
pub fn model_error(library: &FunctionLibrary, params: &Mat, states: &Mat, dt: f64) -> f64 {
    let n = states.rows();
    let mut acc = 0.0;
    for i in 0..n.saturating_sub(1) {
        let pred = hermite_simpson_map(library, params, states.row(i), states.row(i + 1), dt);
        for (k, &p) in pred.iter().enumerate() {
            let r = states.at(i + 1, k) - p;
            acc += r * r;
        }
    }
    acc / n as f64
}

/// Assemble both parts of the objective at a given estimate.
pub fn action(
    est: &TrajectoryEstimate,
    data: &Dataset,
    library: &FunctionLibrary,
    r_f: f64,
) -> Result<ActionValue> {
    Ok(ActionValue {
        measurement: measurement_error(&est.states, data)?,
        model: model_error(library, &est.params, &est.states, data.dt()),
        weight: r_f,
    })
}

/// `out = J(x)^T v` for `J = P * G(x)`, where `G` holds the basis gradients.
/// Goes through `c = P^T v`, so the cost is O(Dq) per call.
#[inline]
fn jac_t_vec(
    library: &FunctionLibrary,
    p_dense: &Mat,
    x: &[f64],
    v: &[f64],
    c: &mut [f64],
    out: &mut [f64],
) {
    for cv in c.iter_mut() {
        *cv = 0.0;
    }
    for (k, &vk) in v.iter().enumerate() {
        if vk == 0.0 {
            continue;
        }
        for (cj, &pj) in c.iter_mut().zip(p_dense.row(k)) {
            *cj += pj * vk;
        }
    }
    for ov in out.iter_mut() {
        *ov = 0.0;
    }
    library.add_weighted_basis_gradients(x, c, out);
}

/// The objective over the packed decision vector, with reusable workspace.
///
/// Decision layout: all states in row-major order (`N*D` entries), then the
/// active parameters in the order given by `active`. Masked-out parameters
/// are excluded from the vector and held at exactly zero.
pub struct ActionProblem<'a> {
    data: &'a Dataset,
    library: &'a FunctionLibrary,
    active: Vec<(usize, usize)>,
    r_f: f64,
    dt: f64,
    n: usize,
    d: usize,
    q: usize,
    // workspace, sized once
    p_dense: Mat,
    theta: Vec<f64>,  // N x q, basis at every grid point
    f_grid: Vec<f64>, // N x D, model velocity at every grid point
    x_m: Vec<f64>,
    theta_m: Vec<f64>,
    f_m: Vec<f64>,
    w: Vec<f64>,
    u: Vec<f64>,
    c: Vec<f64>,
    ga: Vec<f64>,
    gb: Vec<f64>,
    vin: Vec<f64>,
}

impl<'a> ActionProblem<'a> {
    pub fn new(
        data: &'a Dataset,
        library: &'a FunctionLibrary,
        active: Vec<(usize, usize)>,
        r_f: f64,
    ) -> Self {
        let n = data.n_rows();
        let d = library.dimension();
        let q = library.len();
        Self {
            data,
            library,
            active,
            r_f,
            dt: data.dt(),
            n,
            d,
            q,
            p_dense: Mat::zeros(d, q),
            theta: vec![0.0; n * q],
            f_grid: vec![0.0; n * d],
            x_m: vec![0.0; d],
            theta_m: vec![0.0; q],
            f_m: vec![0.0; d],
            w: vec![0.0; d],
            u: vec![0.0; d],
            c: vec![0.0; q],
            ga: vec![0.0; d],
            gb: vec![0.0; d],
            vin: vec![0.0; d],
        }
    }

    pub fn active(&self) -> &[(usize, usize)] {
        &self.active
    }

    pub fn r_f(&self) -> f64 {
        self.r_f
    }

    /// Length of the decision vector: `N*D + |active|`.
    pub fn dim(&self) -> usize {
        self.n * self.d + self.active.len()
    }

    pub fn n_states(&self) -> usize {
        self.n * self.d
    }

    pub fn pack(&self, est: &TrajectoryEstimate) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim());
        x.extend_from_slice(est.states.as_slice());
        for &(k, j) in &self.active {
            x.push(est.params.at(k, j));
        }
        x
    }

    pub fn unpack(&self, x: &[f64]) -> TrajectoryEstimate {
        let states = Mat::from_vec(self.n, self.d, x[..self.n * self.d].to_vec());
        let mut params = Mat::zeros(self.d, self.q);
        for (idx, &(k, j)) in self.active.iter().enumerate() {
            *params.at_mut(k, j) = x[self.n * self.d + idx];
        }
        TrajectoryEstimate { states, params }
    }

    /// Objective value at `x`; when `grad` is given it is overwritten with
    /// the analytic gradient over (states, active parameters).
    pub fn eval(&mut self, x: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        let (n, d, q) = (self.n, self.d, self.q);
        let dt = self.dt;
        let states = &x[..n * d];

        for v in self.p_dense.as_mut_slice().iter_mut() {
            *v = 0.0;
        }
        for (idx, &(k, j)) in self.active.iter().enumerate() {
            *self.p_dense.at_mut(k, j) = x[n * d + idx];
        }
        if let Some(g) = grad.as_deref_mut() {
            for v in g.iter_mut() {
                *v = 0.0;
            }
        }

        // basis and velocity at every grid point
        for i in 0..n {
            let xs = &states[i * d..(i + 1) * d];
            self.library
                .eval_basis_into(xs, &mut self.theta[i * q..(i + 1) * q]);
            rhs_from_basis(
                &self.p_dense,
                &self.theta[i * q..(i + 1) * q],
                &mut self.f_grid[i * d..(i + 1) * d],
            );
        }

        // measurement part
        let inv_n = 1.0 / n as f64;
        let mut ae = 0.0;
        for i in 0..n {
            let y = self.data.values().row(i);
            for (l, &col) in self.data.measured_indices().iter().enumerate() {
                let diff = states[i * d + col] - y[l];
                ae += diff * diff;
                if let Some(g) = grad.as_deref_mut() {
                    g[i * d + col] += 2.0 * inv_n * diff;
                }
            }
        }
        ae *= inv_n;

        // model part
        let mut am = 0.0;
        let scale = 2.0 * self.r_f * inv_n;
        for i in 0..n - 1 {
            let xa = &states[i * d..(i + 1) * d];
            let xb = &states[(i + 1) * d..(i + 2) * d];
            {
                let fa = &self.f_grid[i * d..(i + 1) * d];
                let fb = &self.f_grid[(i + 1) * d..(i + 2) * d];
                for k in 0..d {
                    self.x_m[k] = 0.5 * (xa[k] + xb[k]) + dt / 8.0 * (fa[k] - fb[k]);
                }
            }
            self.library.eval_basis_into(&self.x_m, &mut self.theta_m);
            rhs_from_basis(&self.p_dense, &self.theta_m, &mut self.f_m);

            // residual w = x_b - f(x_a, x_b)
            for k in 0..d {
                let pred = xa[k]
                    + dt / 6.0
                        * (self.f_grid[i * d + k] + 4.0 * self.f_m[k] + self.f_grid[(i + 1) * d + k]);
                self.w[k] = xb[k] - pred;
                am += self.w[k] * self.w[k];
            }

            let Some(g) = grad.as_deref_mut() else { continue };

            // u = J_m^T w
            jac_t_vec(
                self.library,
                &self.p_dense,
                &self.x_m,
                &self.w,
                &mut self.c,
                &mut self.u,
            );

            // (df/dx_a)^T w = w + (dt/6) [J_a^T (w + (dt/2) u) + 2u]
            for k in 0..d {
                self.vin[k] = self.w[k] + dt / 2.0 * self.u[k];
            }
            jac_t_vec(
                self.library,
                &self.p_dense,
                xa,
                &self.vin,
                &mut self.c,
                &mut self.ga,
            );
            // (df/dx_b)^T w = (dt/6) [J_b^T (w - (dt/2) u) + 2u]
            for k in 0..d {
                self.vin[k] = self.w[k] - dt / 2.0 * self.u[k];
            }
            jac_t_vec(
                self.library,
                &self.p_dense,
                xb,
                &self.vin,
                &mut self.c,
                &mut self.gb,
            );

            for k in 0..d {
                let dfa = self.w[k] + dt / 6.0 * (self.ga[k] + 2.0 * self.u[k]);
                let dfb = dt / 6.0 * (self.gb[k] + 2.0 * self.u[k]);
                // dr/dx_a = -df/dx_a, dr/dx_b = I - df/dx_b
                g[i * d + k] -= scale * dfa;
                g[(i + 1) * d + k] += scale * (self.w[k] - dfb);
            }

            let theta_a = &self.theta[i * q..(i + 1) * q];
            let theta_b = &self.theta[(i + 1) * q..(i + 2) * q];
            for (idx, &(k, j)) in self.active.iter().enumerate() {
                let simpson = theta_a[j] + 4.0 * self.theta_m[j] + theta_b[j];
                let mid = dt / 2.0 * (theta_a[j] - theta_b[j]);
                let dp = dt / 6.0 * (simpson * self.w[k] + mid * self.u[k]);
                g[n * d + idx] -= scale * dp;
            }
        }
        am *= inv_n;

        ae + self.r_f * am
    }
}

/// The action as a structured least-squares problem for the damped
/// Gauss-Newton driver: assembles the arrowhead normal equations
/// (block-tridiagonal over states, dense parameter corner).
pub struct ActionGaussNewton<'a> {
    inner: ActionProblem<'a>,
    // per-grid-point caches
    jac: Vec<f64>, // N x (d*d), J(X_i) = P * G(X_i)
    // per-interval scratch
    jm: Vec<f64>,
    a_blk: Vec<f64>,
    b_blk: Vec<f64>,
    pm: Vec<f64>, // d x p parameter Jacobian of the residual
    w: Vec<f64>,
    x_m: Vec<f64>,
    theta_m: Vec<f64>,
    f_m: Vec<f64>,
    tmp: Vec<f64>,
}

impl<'a> ActionGaussNewton<'a> {
    pub fn new(
        data: &'a Dataset,
        library: &'a FunctionLibrary,
        active: Vec<(usize, usize)>,
        r_f: f64,
    ) -> Self {
        let inner = ActionProblem::new(data, library, active, r_f);
        let (n, d, q, p) = (inner.n, inner.d, inner.q, inner.active.len());
        Self {
            inner,
            jac: vec![0.0; n * d * d],
            jm: vec![0.0; d * d],
            a_blk: vec![0.0; d * d],
            b_blk: vec![0.0; d * d],
            pm: vec![0.0; d * p],
            w: vec![0.0; d],
            x_m: vec![0.0; d],
            theta_m: vec![0.0; q],
            f_m: vec![0.0; d],
            tmp: vec![0.0; d],
        }
    }

    pub fn problem(&self) -> &ActionProblem<'a> {
        &self.inner
    }

    pub fn pack(&self, est: &TrajectoryEstimate) -> Vec<f64> {
        self.inner.pack(est)
    }

    pub fn unpack(&self, x: &[f64]) -> TrajectoryEstimate {
        self.inner.unpack(x)
    }

    /// `J(x) = P G(x)` into a `d x d` row-major block.
    fn model_jacobian(library: &FunctionLibrary, p_dense: &Mat, x: &[f64], out: &mut [f64]) {
        let d = library.dimension();
        for v in out.iter_mut() {
            *v = 0.0;
        }
        for (j, term) in library.terms().iter().enumerate() {
            for &(l, _) in term.nonzero() {
                let dtheta = term.partial(x, l);
                if dtheta == 0.0 {
                    continue;
                }
                for k in 0..d {
                    let p = p_dense.at(k, j);
                    if p != 0.0 {
                        out[k * d + l] += p * dtheta;
                    }
                }
            }
        }
    }
}

impl crate::arrowhead::ArrowheadLeastSquares for ActionGaussNewton<'_> {
    fn n_blocks(&self) -> usize {
        self.inner.n
    }

    fn block_dim(&self) -> usize {
        self.inner.d
    }

    fn n_corner(&self) -> usize {
        self.inner.active.len()
    }

    fn value(&mut self, x: &[f64]) -> f64 {
        self.inner.eval(x, None)
    }

    fn assemble(&mut self, x: &[f64], sys: &mut crate::arrowhead::ArrowheadNormal) -> f64 {
        let (n, d, q) = (self.inner.n, self.inner.d, self.inner.q);
        let p_active = self.inner.active.len();
        let dt = self.inner.dt;
        let r_f = self.inner.r_f;
        let library = self.inner.library;
        let states = &x[..n * d];
        sys.clear();

        for v in self.inner.p_dense.as_mut_slice().iter_mut() {
            *v = 0.0;
        }
        for (idx, &(k, j)) in self.inner.active.iter().enumerate() {
            *self.inner.p_dense.at_mut(k, j) = x[n * d + idx];
        }

        // basis, velocity, and Jacobian at every grid point
        for i in 0..n {
            let xs = &states[i * d..(i + 1) * d];
            library.eval_basis_into(xs, &mut self.inner.theta[i * q..(i + 1) * q]);
            rhs_from_basis(
                &self.inner.p_dense,
                &self.inner.theta[i * q..(i + 1) * q],
                &mut self.inner.f_grid[i * d..(i + 1) * d],
            );
            Self::model_jacobian(
                library,
                &self.inner.p_dense,
                xs,
                &mut self.jac[i * d * d..(i + 1) * d * d],
            );
        }

        // measurement part
        let inv_n = 1.0 / n as f64;
        let mut value = 0.0;
        for i in 0..n {
            let y = self.inner.data.values().row(i);
            for (l, &col) in self.inner.data.measured_indices().iter().enumerate() {
                let diff = states[i * d + col] - y[l];
                value += inv_n * diff * diff;
                sys.grad[i * d + col] += 2.0 * inv_n * diff;
                sys.diag[i * d * d + col * d + col] += 2.0 * inv_n;
            }
        }

        // model part
        let c2 = 2.0 * r_f * inv_n;
        let mut am = 0.0;
        for i in 0..n.saturating_sub(1) {
            let xa = &states[i * d..(i + 1) * d];
            let xb = &states[(i + 1) * d..(i + 2) * d];
            {
                let fa = &self.inner.f_grid[i * d..(i + 1) * d];
                let fb = &self.inner.f_grid[(i + 1) * d..(i + 2) * d];
                for k in 0..d {
                    self.x_m[k] = 0.5 * (xa[k] + xb[k]) + dt / 8.0 * (fa[k] - fb[k]);
                }
            }
            library.eval_basis_into(&self.x_m, &mut self.theta_m);
            rhs_from_basis(&self.inner.p_dense, &self.theta_m, &mut self.f_m);
            Self::model_jacobian(library, &self.inner.p_dense, &self.x_m, &mut self.jm);

            for k in 0..d {
                let pred = xa[k]
                    + dt / 6.0
                        * (self.inner.f_grid[i * d + k]
                            + 4.0 * self.f_m[k]
                            + self.inner.f_grid[(i + 1) * d + k]);
                self.w[k] = xb[k] - pred;
                am += self.w[k] * self.w[k];
            }

            let ja = &self.jac[i * d * d..(i + 1) * d * d];
            let jb = &self.jac[(i + 1) * d * d..(i + 2) * d * d];
            // dr/dx_a = -(I + dt/6 (J_a + 2 J_m + dt/2 J_m J_a))
            // dr/dx_b =   I - dt/6 (J_b + 2 J_m - dt/2 J_m J_b)
            for r in 0..d {
                for c in 0..d {
                    let mut jm_ja = 0.0;
                    let mut jm_jb = 0.0;
                    for k in 0..d {
                        jm_ja += self.jm[r * d + k] * ja[k * d + c];
                        jm_jb += self.jm[r * d + k] * jb[k * d + c];
                    }
                    let ident = if r == c { 1.0 } else { 0.0 };
                    self.a_blk[r * d + c] = -(ident
                        + dt / 6.0
                            * (ja[r * d + c] + 2.0 * self.jm[r * d + c] + dt / 2.0 * jm_ja));
                    self.b_blk[r * d + c] = ident
                        - dt / 6.0
                            * (jb[r * d + c] + 2.0 * self.jm[r * d + c] - dt / 2.0 * jm_jb);
                }
            }

            // dr/dp column for active (k, j):
            // -(dt/6) [ (ta + 4 tm + tb) e_k + (dt/2)(ta - tb) J_m e_k ]
            let theta_a = &self.inner.theta[i * q..(i + 1) * q];
            let theta_b = &self.inner.theta[(i + 1) * q..(i + 2) * q];
            for (idx, &(k, j)) in self.inner.active.iter().enumerate() {
                let simpson = theta_a[j] + 4.0 * self.theta_m[j] + theta_b[j];
                let mid = dt / 2.0 * (theta_a[j] - theta_b[j]);
                for r in 0..d {
                    let ek = if r == k { 1.0 } else { 0.0 };
                    self.pm[r * p_active + idx] =
                        -dt / 6.0 * (simpson * ek + mid * self.jm[r * d + k]);
                }
            }

            // accumulate H += 2c J^T J and g += 2c J^T w per block pair
            for r in 0..d {
                for c in 0..d {
                    let mut ata = 0.0;
                    let mut btb = 0.0;
                    let mut bta = 0.0;
                    for k in 0..d {
                        ata += self.a_blk[k * d + r] * self.a_blk[k * d + c];
                        btb += self.b_blk[k * d + r] * self.b_blk[k * d + c];
                        bta += self.b_blk[k * d + r] * self.a_blk[k * d + c];
                    }
                    sys.diag[i * d * d + r * d + c] += c2 * ata;
                    sys.diag[(i + 1) * d * d + r * d + c] += c2 * btb;
                    // off block stores H[x_{i+1}, x_i] = B^T A
                    sys.off[i * d * d + r * d + c] += c2 * bta;
                }
                let mut atw = 0.0;
                let mut btw = 0.0;
                for k in 0..d {
                    atw += self.a_blk[k * d + r] * self.w[k];
                    btw += self.b_blk[k * d + r] * self.w[k];
                }
                sys.grad[i * d + r] += c2 * atw;
                sys.grad[(i + 1) * d + r] += c2 * btw;
            }
            for r in 0..d {
                for jcol in 0..p_active {
                    let pv = self.pm[r * p_active + jcol];
                    if pv == 0.0 {
                        continue;
                    }
                    for c in 0..d {
                        sys.coupling[i * d * p_active + c * p_active + jcol] +=
                            c2 * self.a_blk[r * d + c] * pv;
                        sys.coupling[(i + 1) * d * p_active + c * p_active + jcol] +=
                            c2 * self.b_blk[r * d + c] * pv;
                    }
                    sys.grad[n * d + jcol] += c2 * pv * self.w[r];
                    for c in jcol..p_active {
                        sys.corner[jcol * p_active + c] += c2 * pv * self.pm[r * p_active + c];
                    }
                }
            }
        }
        // mirror the corner's upper triangle
        for r in 0..p_active {
            for c in 0..r {
                sys.corner[r * p_active + c] = sys.corner[c * p_active + r];
            }
        }
        let _ = &mut self.tmp;
        value + r_f * am * inv_n
    }
}

/// All (equation, term) pairs of a full `D x q` mask, row-major.
pub fn full_active_set(d: usize, q: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|k| (0..q).map(move |j| (k, j))).collect()
}

/// Active set from a boolean mask in row-major `D x q` order.
pub fn active_from_mask(mask: &[bool], q: usize) -> Vec<(usize, usize)> {
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| (i / q, i % q))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library::build_monomial_library;
    use crate::optimize::finite_diff_gradient;
    use crate::presets;
    use crate::rng::stream_rng;
    use crate::sim::{add_noise, make_dataset, simulate_rk4};
    use rand::Rng;

    fn lorenz_data(n: usize, omega: f64) -> Dataset {
        let preset = presets::lorenz();
        let traj = simulate_rk4(&preset.model, &preset.x0, preset.dt, n).unwrap();
        let noisy = add_noise(&traj, omega, 17);
        make_dataset(&noisy, &[0, 2], preset.dt).unwrap()
    }

    #[test]
    fn measurement_error_reference_cases() {
        let data = lorenz_data(40, 0.0);
        let preset = presets::lorenz();
        let traj = simulate_rk4(&preset.model, &preset.x0, preset.dt, 40).unwrap();
        // estimate matching the measured columns scores zero regardless of y
        let mut states = traj.clone();
        for i in 0..states.rows() {
            *states.at_mut(i, 1) = -99.0;
        }
        assert_eq!(measurement_error(&states, &data).unwrap(), 0.0);

        // constant difference of 3 on one measured column of a 5-point set
        let mut vals = Mat::zeros(5, 1);
        for i in 0..5 {
            *vals.at_mut(i, 0) = 1.0;
        }
        let tiny = Dataset::new(vals, vec![0], 0.1).unwrap();
        let mut est = Mat::zeros(5, 2);
        for i in 0..5 {
            *est.at_mut(i, 0) = 4.0;
        }
        assert!((measurement_error(&est, &tiny).unwrap() - 9.0).abs() < 1e-14);

        // row-count mismatch is an error
        assert!(measurement_error(&Mat::zeros(4, 2), &tiny).is_err());
    }

    #[test]
    fn measurement_error_matches_noise_variance() {
        // true trajectory against omega-noised data: expect about L * omega^2
        let preset = presets::lorenz();
        let n = 501;
        let traj = simulate_rk4(&preset.model, &preset.x0, preset.dt, n).unwrap();
        let data = make_dataset(&add_noise(&traj, 0.01, 3), &[0, 2], preset.dt).unwrap();
        let ae = measurement_error(&traj, &data).unwrap();
        let expect = 2.0 * 0.01 * 0.01;
        assert!(
            (ae - expect).abs() < 0.3 * expect,
            "A_E {ae} vs expectation {expect}"
        );
    }

    #[test]
    fn map_with_zero_params_is_identity() {
        let lib = build_monomial_library(3, 2);
        let params = Mat::zeros(3, 10);
        let f = hermite_simpson_map(&lib, &params, &[1.0, 2.0, 3.0], &[9.0, 9.0, 9.0], 0.01);
        assert_eq!(f, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn map_is_fifth_order_on_exponential_decay() {
        // dx/dt = -x: residual along the exact solution is far below 1e-12
        let lib = build_monomial_library(1, 1);
        let mut params = Mat::zeros(1, 2);
        *params.at_mut(0, 1) = -1.0;
        let dt = 0.01;
        let f = hermite_simpson_map(&lib, &params, &[1.0], &[(-dt_f64(dt)).exp()], dt);
        let residual = ((-dt_f64(dt)).exp() - f[0]).abs();
        assert!(residual <= 1e-12, "residual {residual}");
    }

    fn dt_f64(dt: f64) -> f64 {
        dt
    }

    /// 3x3 matrix exponential times vector by scaled Taylor series; the
    /// independent flow oracle for the collocation order study.
    pub(crate) fn expm_mul(a: &[[f64; 3]; 3], t: f64, x0: &[f64; 3]) -> [f64; 3] {
        // scale so the series converges fast, then square
        let norm: f64 = a
            .iter()
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
            * t.abs();
        let s = norm.log2().ceil().max(0.0) as u32;
        let scale = 1.0 / f64::powi(2.0, s as i32);
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = a[i][j] * t * scale;
            }
        }
        // exp(m) via 24 Taylor terms
        let mut result = [[0.0; 3]; 3];
        let mut term = [[0.0; 3]; 3];
        for i in 0..3 {
            result[i][i] = 1.0;
            term[i][i] = 1.0;
        }
        for k in 1..=24 {
            let mut next = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for l in 0..3 {
                        next[i][j] += term[i][l] * m[l][j];
                    }
                }
            }
            for i in 0..3 {
                for j in 0..3 {
                    term[i][j] = next[i][j] / k as f64;
                    result[i][j] += term[i][j];
                }
            }
        }
        for _ in 0..s {
            let mut sq = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for l in 0..3 {
                        sq[i][j] += result[i][l] * result[l][j];
                    }
                }
            }
            result = sq;
        }
        let mut out = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i] += result[i][j] * x0[j];
            }
        }
        out
    }

    /// Random stable linear system as a (library, params) pair plus its matrix.
    pub(crate) fn random_stable_linear(seed: u64) -> ([[f64; 3]; 3], Mat) {
        let mut rng = stream_rng(seed, &[0x11]);
        let mut a = [[0.0; 3]; 3];
        for (i, row) in a.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = rng.gen_range(-1.0..1.0);
                if i == j {
                    *v -= 2.0; // diagonally dominant negative: stable
                }
            }
        }
        let lib = build_monomial_library(3, 2);
        let mut params = Mat::zeros(3, lib.len());
        // linear terms sit at indices 1..=3 of the graded-lex basis
        for i in 0..3 {
            for j in 0..3 {
                *params.at_mut(i, 1 + j) = a[i][j];
            }
        }
        (a, params)
    }

    #[test]
    fn map_residual_scales_fifth_order_on_linear_flow() {
        let lib = build_monomial_library(3, 2);
        let (a, params) = random_stable_linear(5);
        let x0 = [0.8, -0.4, 1.1];
        let residual = |dt: f64| {
            let x1 = expm_mul(&a, dt, &x0);
            let f = hermite_simpson_map(&lib, &params, &x0, &x1, dt);
            let mut norm = 0.0f64;
            for k in 0..3 {
                norm += (x1[k] - f[k]) * (x1[k] - f[k]);
            }
            norm.sqrt()
        };
        let r1 = residual(0.1);
        let r2 = residual(0.05);
        let ratio = r1 / r2;
        assert!((ratio - 32.0).abs() <= 8.0, "ratio {ratio}");
    }

    #[test]
    fn model_error_reference_cases() {
        // constant states, zero parameters: perfect persistence
        let lib = build_monomial_library(3, 2);
        let params = Mat::zeros(3, 10);
        let mut states = Mat::zeros(20, 3);
        for i in 0..20 {
            states.row_mut(i).copy_from_slice(&[1.0, 2.0, 3.0]);
        }
        assert_eq!(model_error(&lib, &params, &states, 0.01), 0.0);

        // true parameters on the generating trajectory
        let preset = presets::lorenz();
        let traj = simulate_rk4(&preset.model, &preset.x0, preset.dt, 501).unwrap();
        let am = model_error(preset.model.library(), preset.model.params(), &traj, preset.dt);
        assert!(am <= 1e-8, "A_M on true trajectory {am}");

        // quadratic form: doubling the state scale of a persistence problem
        // quadruples the error
        let mut ramp = Mat::zeros(10, 3);
        for i in 0..10 {
            for k in 0..3 {
                *ramp.at_mut(i, k) = i as f64 + k as f64;
            }
        }
        let mut ramp2 = ramp.clone();
        for v in ramp2.as_mut_slice().iter_mut() {
            *v *= 2.0;
        }
        let e1 = model_error(&lib, &params, &ramp, 0.01);
        let e2 = model_error(&lib, &params, &ramp2, 0.01);
        assert!((e2 / e1 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn action_assembles_both_parts() {
        let v = ActionValue { measurement: 0.0, model: 2.0, weight: 3.0 };
        assert_eq!(v.total(), 6.0);

        // estimate equal to constant data with zero parameters: total zero
        let mut vals = Mat::zeros(6, 1);
        for i in 0..6 {
            *vals.at_mut(i, 0) = 2.5;
        }
        let data = Dataset::new(vals, vec![0], 0.1).unwrap();
        let lib = build_monomial_library(2, 1);
        let mut states = Mat::zeros(6, 2);
        for i in 0..6 {
            *states.at_mut(i, 0) = 2.5;
            *states.at_mut(i, 1) = 2.5;
        }
        let est = TrajectoryEstimate { states, params: Mat::zeros(2, 3) };
        let total = action(&est, &data, &lib, 5.0).unwrap().total();
        assert_eq!(total, 0.0);
    }

    fn random_estimate(n: usize, lib: &FunctionLibrary, seed: u64) -> TrajectoryEstimate {
        let d = lib.dimension();
        let mut rng = stream_rng(seed, &[0x22]);
        let mut states = Mat::zeros(n, d);
        for v in states.as_mut_slice().iter_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let mut params = Mat::zeros(d, lib.len());
        for v in params.as_mut_slice().iter_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        TrajectoryEstimate { states, params }
    }

    /// Gradient-check point: the true path perturbed by U(-0.25, 0.25) with
    /// parameters U(-0.1, 0.1). Keeps the objective small enough that the
    /// step-1e-6 central-difference oracle resolves 1e-5 relative error even
    /// at the largest annealing weight.
    pub(crate) fn gradcheck_estimate(
        traj: &Mat,
        lib: &FunctionLibrary,
        seed: u64,
    ) -> TrajectoryEstimate {
        let d = lib.dimension();
        let mut rng = stream_rng(seed, &[0x22]);
        let mut states = Mat::zeros(traj.rows(), d);
        for i in 0..traj.rows() {
            for k in 0..d {
                *states.at_mut(i, k) = traj.at(i, k) + rng.gen_range(-0.25..0.25);
            }
        }
        let mut params = Mat::zeros(d, lib.len());
        for v in params.as_mut_slice().iter_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
        TrajectoryEstimate { states, params }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let preset = presets::lorenz();
        let traj = simulate_rk4(&preset.model, &preset.x0, preset.dt, 20).unwrap();
        let data = lorenz_data(20, 0.01);
        let lib = build_monomial_library(3, 2);
        for r_f in [0.0, 1.0, 1e4] {
            for seed in 0..5 {
                let est = gradcheck_estimate(&traj, &lib, seed);
                let active = full_active_set(3, lib.len());
                let mut problem = ActionProblem::new(&data, &lib, active, r_f);
                let x = problem.pack(&est);
                let mut grad = vec![0.0; x.len()];
                problem.eval(&x, Some(&mut grad));
                let fd = finite_diff_gradient(|p| problem.eval(p, None), &x, 1e-6);
                for i in 0..x.len() {
                    let denom = grad[i].abs().max(fd[i].abs()).max(1.0);
                    assert!(
                        (grad[i] - fd[i]).abs() / denom <= 1e-5,
                        "coord {i}: analytic {} vs fd {} (r_f={r_f}, seed={seed})",
                        grad[i],
                        fd[i]
                    );
                }
            }
        }
    }

    #[test]
    fn zero_weight_ignores_params_and_hidden_states() {
        let data = lorenz_data(20, 0.01);
        let lib = build_monomial_library(3, 2);
        let est = random_estimate(20, &lib, 3);
        let active = full_active_set(3, lib.len());
        let mut problem = ActionProblem::new(&data, &lib, active, 0.0);
        let x = problem.pack(&est);
        let mut grad = vec![0.0; x.len()];
        problem.eval(&x, Some(&mut grad));
        let d = 3;
        for i in 0..20 {
            assert_eq!(grad[i * d + 1], 0.0, "hidden state {i}");
        }
        for g in &grad[20 * d..] {
            assert_eq!(*g, 0.0);
        }
    }

    #[test]
    fn total_is_monotone_in_weight() {
        let data = lorenz_data(20, 0.01);
        let lib = build_monomial_library(3, 2);
        let est = random_estimate(20, &lib, 8);
        let mut last = f64::NEG_INFINITY;
        for r_f in [0.0, 0.1, 1.0, 10.0, 1e4] {
            let v = action(&est, &data, &lib, r_f).unwrap().total();
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn action_is_invariant_under_basis_permutation() {
        let data = lorenz_data(15, 0.01);
        let lib = build_monomial_library(3, 2);
        let est = random_estimate(15, &lib, 4);
        let base = action(&est, &data, &lib, 7.0).unwrap().total();

        // reversed basis order with consistently permuted parameters
        let exps: Vec<Vec<u8>> = lib.terms().iter().rev().map(|t| t.exponents().to_vec()).collect();
        let rev_lib = FunctionLibrary::from_exponents(3, exps).unwrap();
        let q = lib.len();
        let mut rev_params = Mat::zeros(3, q);
        for k in 0..3 {
            for j in 0..q {
                *rev_params.at_mut(k, q - 1 - j) = est.params.at(k, j);
            }
        }
        let rev_est = TrajectoryEstimate { states: est.states.clone(), params: rev_params };
        let permuted = action(&rev_est, &data, &rev_lib, 7.0).unwrap().total();
        assert!(
            (base - permuted).abs() <= 1e-12 * base.abs().max(1.0),
            "{base} vs {permuted}"
        );
    }

    #[test]
    fn masked_out_parameters_are_not_in_the_vector() {
        let data = lorenz_data(10, 0.0);
        let lib = build_monomial_library(3, 2);
        let truth = presets::lorenz().model;
        let active = active_from_mask(truth.mask(), lib.len());
        assert_eq!(active.len(), 7);
        let problem = ActionProblem::new(&data, &lib, active, 1.0);
        assert_eq!(problem.dim(), 10 * 3 + 7);
        let est = TrajectoryEstimate {
            states: Mat::zeros(10, 3),
            params: truth.params().clone(),
        };
        let x = problem.pack(&est);
        let back = problem.unpack(&x);
        assert_eq!(back.params.as_slice(), truth.params().as_slice());
    }
}
