//! Post-selection validation: hidden initial-condition estimation,
//! Lyapunov-windowed segment errors, information criteria, Pareto front,
//! recovery rates, and trend statistics.

use rand::seq::SliceRandom;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::Dataset;
use crate::error::DahsiError;
use crate::mat::Mat;
use crate::model::CandidateModel;
use crate::rng::stream_rng;
use crate::sim::simulate_rk4;
use crate::Result;

/// Central finite-difference stencil used for the hidden-IC time derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StencilOrder {
    Fourth,
    Eighth,
}

impl StencilOrder {
    /// Half-width: points needed on each side of the evaluation index.
    pub fn half_width(self) -> usize {
        match self {
            StencilOrder::Fourth => 2,
            StencilOrder::Eighth => 4,
        }
    }

    pub fn order(self) -> usize {
        match self {
            StencilOrder::Fourth => 4,
            StencilOrder::Eighth => 8,
        }
    }

    fn coefficients(self) -> (&'static [f64], f64) {
        match self {
            StencilOrder::Fourth => (&[1.0, -8.0, 0.0, 8.0, -1.0], 12.0),
            StencilOrder::Eighth => (
                &[3.0, -32.0, 168.0, -672.0, 0.0, 672.0, -168.0, 32.0, -3.0],
                840.0,
            ),
        }
    }

    /// d/dt of `series` at index `center` (needs `half_width` points around it).
    pub fn derivative(self, series: &[f64], center: usize, dt: f64) -> f64 {
        let (coeffs, den) = self.coefficients();
        let h = self.half_width();
        assert!(center >= h && center + h < series.len(), "stencil out of range");
        let mut acc = 0.0;
        for (s, &c) in coeffs.iter().enumerate() {
            acc += c * series[center - h + s];
        }
        acc / (den * dt)
    }
}

/// Contiguous validation windows, each `M + 4` points: four burn-in points
/// reserved for the hidden-IC estimate, `M` scored.
#[derive(Debug, Clone)]
pub struct SegmentSet {
    pub windows: Vec<Mat>,
    pub measured_indices: Vec<usize>,
    pub dt: f64,
    /// Scored points per window.
    pub m_scored: usize,
    /// Lyapunov time the window length was derived from.
    pub lyapunov_time: f64,
}

/// Cut the validation data into consecutive non-overlapping windows of
/// `round(0.25 * lyapunov_time / dt)` points (at least 5, at most
/// `max_window_points`); non-chaotic systems (infinite Lyapunov time) get
/// the cap.
pub fn build_segments(
    data: &Dataset,
    lyapunov_time: f64,
    max_window_points: usize,
) -> Result<SegmentSet> {
    let dt = data.dt();
    let target = if lyapunov_time.is_finite() {
        (0.25 * lyapunov_time / dt).round() as usize
    } else {
        max_window_points
    };
    let len = target.clamp(5, max_window_points.max(5));
    let n = data.n_rows();
    if n < len {
        return Err(DahsiError::TooShort { needed: len, got: n });
    }
    let count = n / len;
    let mut windows = Vec::with_capacity(count);
    for s in 0..count {
        let mut w = Mat::zeros(len, data.n_cols());
        for i in 0..len {
            w.row_mut(i).copy_from_slice(data.values().row(s * len + i));
        }
        windows.push(w);
    }
    Ok(SegmentSet {
        windows,
        measured_indices: data.measured_indices().to_vec(),
        dt,
        m_scored: len - 4,
        lyapunov_time,
    })
}

/// Estimate the hidden variable at the stencil center of a window.
///
/// The time derivative of the first measured column is taken by the central
/// stencil; the corresponding model equation is then solved for the hidden
/// variable, which must enter that equation linearly.
pub fn estimate_hidden_ic(
    model: &CandidateModel,
    window: &Mat,
    measured_indices: &[usize],
    dt: f64,
    stencil: StencilOrder,
) -> Result<f64> {
    let d = model.dimension();
    let hidden: Vec<usize> = (0..d).filter(|k| !measured_indices.contains(k)).collect();
    if hidden.len() != 1 {
        return Err(DahsiError::InvalidData(format!(
            "closed-form IC estimation needs exactly one hidden variable, found {}",
            hidden.len()
        )));
    }
    let h = hidden[0];
    let center = stencil.half_width();
    if window.rows() < 2 * center + 1 {
        return Err(DahsiError::TooShort {
            needed: 2 * center + 1,
            got: window.rows(),
        });
    }

    let series = window.col(0);
    let dxdt = stencil.derivative(&series, center, dt);

    // measured state values at the evaluation time
    let mut state = vec![0.0; d];
    for (l, &col) in measured_indices.iter().enumerate() {
        state[col] = window.at(center, l);
    }

    // split the equation of the first measured variable into a*y + b
    let eq = measured_indices[0];
    let q = model.library().len();
    let mut a = 0.0;
    let mut b = 0.0;
    for (j, term) in model.library().terms().iter().enumerate() {
        if !model.mask()[eq * q + j] {
            continue;
        }
        let p = model.params().at(eq, j);
        let e_h = term.exponents()[h];
        if e_h >= 2 {
            return Err(DahsiError::NonlinearHidden);
        }
        // monomial value with the hidden factor removed
        let mut v = 1.0;
        for (k, &e) in term.exponents().iter().enumerate() {
            if k != h && e > 0 {
                v *= state[k].powi(e as i32);
            }
        }
        if e_h == 1 {
            a += p * v;
        } else {
            b += p * v;
        }
    }
    if a == 0.0 {
        return Err(DahsiError::UnidentifiableIc);
    }
    Ok((dxdt - b) / a)
}

/// Mean squared prediction error of a model over one window:
/// `1/(L*M) * sum over the M scored points and L measured columns`.
///
/// The model is integrated by RK4 from the stencil-center state (hidden
/// component estimated when one exists, data values otherwise); the first
/// four points of the window are burn-in and are not scored. A trajectory
/// blow-up yields the `+inf` sentinel rather than an error.
pub fn segment_error(
    model: &CandidateModel,
    window: &Mat,
    measured_indices: &[usize],
    dt: f64,
    stencil: StencilOrder,
) -> Result<f64> {
    let d = model.dimension();
    let m = window.rows().saturating_sub(4);
    if m == 0 {
        return Err(DahsiError::TooShort { needed: 5, got: window.rows() });
    }
    let has_hidden = measured_indices.len() < d;
    let start = if has_hidden { stencil.half_width() } else { 2 };
    if start >= window.rows() {
        return Err(DahsiError::TooShort {
            needed: start + 1,
            got: window.rows(),
        });
    }

    let mut state = vec![0.0; d];
    for (l, &col) in measured_indices.iter().enumerate() {
        state[col] = window.at(start, l);
    }
    if has_hidden {
        let h = (0..d).find(|k| !measured_indices.contains(k)).unwrap();
        state[h] = estimate_hidden_ic(model, window, measured_indices, dt, stencil)?;
    }

    let steps = window.rows() - start;
    let traj = match simulate_rk4(model, &state, dt, steps) {
        Ok(t) => t,
        Err(DahsiError::BlowUp { .. }) => return Ok(f64::INFINITY),
        Err(e) => return Err(e),
    };

    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 4..window.rows() {
        let sim = traj.row(i - start);
        for (l, &col) in measured_indices.iter().enumerate() {
            let diff = sim[col] - window.at(i, l);
            acc += diff * diff;
        }
        count += 1;
    }
    debug_assert_eq!(count, m);
    let err = acc / (measured_indices.len() * m) as f64;
    if err.is_finite() {
        Ok(err)
    } else {
        Ok(f64::INFINITY)
    }
}

/// Sum of per-segment errors.
pub fn total_error(per_segment: &[f64]) -> f64 {
    per_segment.iter().sum()
}

/// Which criterion orders the report rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriterionMode {
    Aic,
    Bic,
}

/// Per-model validation scores.
#[derive(Debug, Clone)]
pub struct ModelScore {
    pub mask: Vec<bool>,
    pub n_terms: usize,
    pub e_av: f64,
    pub aic: Option<f64>,
    pub bic: Option<f64>,
    pub d_aic: Option<f64>,
    pub d_bic: Option<f64>,
    pub pareto: bool,
    /// Why a model was excluded from a criterion, when it was.
    pub note: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub scores: Vec<ModelScore>,
    pub s_used: usize,
    pub m_scored: usize,
    pub lyapunov_time: f64,
    pub stencil_order: usize,
    pub subsample_seed: u64,
}

/// Score models over the segments: per-segment errors, their sum `E_av`,
/// AIC/BIC with their rescaled deltas, and the Pareto flags.
///
/// `AIC = S ln(RSS/S) + 2 N_p` and `BIC = S ln(RSS/S) + S ln(N_p)` with
/// `RSS` the sum of the per-segment errors over the `S` used segments.
/// When `subsample` is below the available count, `S` segments are drawn
/// without replacement using the seed; the same draw applies to every model.
pub fn information_criteria(
    models: &[CandidateModel],
    segments: &SegmentSet,
    mode: CriterionMode,
    subsample: Option<usize>,
    subsample_seed: u64,
    stencil: StencilOrder,
) -> Result<ValidationReport> {
    if models.is_empty() {
        return Err(DahsiError::InvalidData("no models to score".into()));
    }
    let total = segments.windows.len();
    let chosen: Vec<usize> = match subsample {
        Some(s) if s < total => {
            let mut idx: Vec<usize> = (0..total).collect();
            let mut rng = stream_rng(subsample_seed, &[0x5345_47]);
            idx.shuffle(&mut rng);
            let mut take = idx[..s].to_vec();
            take.sort_unstable();
            take
        }
        _ => (0..total).collect(),
    };
    let s_used = chosen.len();
    if s_used == 0 {
        return Err(DahsiError::InvalidData("no validation segments".into()));
    }

    let mut scores = Vec::with_capacity(models.len());
    for model in models {
        let n_terms = model.term_count();
        let mut rss = 0.0f64;
        let mut note = None;
        let mut failed = false;
        for &s in &chosen {
            match segment_error(
                model,
                &segments.windows[s],
                &segments.measured_indices,
                segments.dt,
                stencil,
            ) {
                Ok(e) => rss += e,
                Err(e) => {
                    note = Some(format!("validation failed: {e}"));
                    failed = true;
                    break;
                }
            }
        }
        let e_av = if failed { f64::INFINITY } else { rss };
        let log_term = if e_av.is_finite() && e_av > 0.0 {
            Some(s_used as f64 * (e_av / s_used as f64).ln())
        } else if e_av == 0.0 {
            Some(f64::NEG_INFINITY)
        } else {
            None
        };
        let aic = log_term.map(|l| l + 2.0 * n_terms as f64);
        let bic = if n_terms == 0 {
            if note.is_none() {
                note = Some("empty model excluded from BIC".into());
            }
            None
        } else {
            log_term.map(|l| l + s_used as f64 * (n_terms as f64).ln())
        };
        scores.push(ModelScore {
            mask: model.mask().to_vec(),
            n_terms,
            e_av,
            aic,
            bic,
            d_aic: None,
            d_bic: None,
            pareto: false,
            note,
        });
    }

    let min_aic = scores
        .iter()
        .filter_map(|s| s.aic)
        .fold(f64::INFINITY, f64::min);
    let min_bic = scores
        .iter()
        .filter_map(|s| s.bic)
        .fold(f64::INFINITY, f64::min);
    for s in scores.iter_mut() {
        s.d_aic = s.aic.map(|a| a - min_aic);
        s.d_bic = s.bic.map(|b| b - min_bic);
    }
    mark_pareto(&mut scores);

    match mode {
        CriterionMode::Aic => scores.sort_by(|a, b| {
            opt_cmp(a.d_aic, b.d_aic).then_with(|| a.mask.cmp(&b.mask))
        }),
        CriterionMode::Bic => scores.sort_by(|a, b| {
            opt_cmp(a.d_bic, b.d_bic).then_with(|| a.mask.cmp(&b.mask))
        }),
    }

    Ok(ValidationReport {
        scores,
        s_used,
        m_scored: segments.m_scored,
        lyapunov_time: segments.lyapunov_time,
        stencil_order: stencil.order(),
        subsample_seed,
    })
}

fn opt_cmp(a: Option<f64>, b: Option<f64>) -> std::cmp::Ordering {
    // None (excluded) ranks after every finite score
    match (a, b) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    }
}

/// Flag the non-dominated set under (term count, E_av), both minimized;
/// exact ties are kept on the front.
pub fn mark_pareto(scores: &mut [ModelScore]) {
    let points: Vec<(usize, f64)> = scores.iter().map(|s| (s.n_terms, s.e_av)).collect();
    for (i, s) in scores.iter_mut().enumerate() {
        let (n_i, e_i) = points[i];
        let dominated = points.iter().enumerate().any(|(j, &(n_j, e_j))| {
            j != i && n_j <= n_i && e_j <= e_i && (n_j < n_i || e_j < e_i)
        });
        s.pareto = !dominated;
    }
}

/// Fraction of models whose structure matches the truth.
pub fn recovery_rate(models: &[CandidateModel], truth: &CandidateModel) -> Result<f64> {
    if models.is_empty() {
        return Ok(0.0);
    }
    let mut matches = 0usize;
    for m in models {
        if m.structure_match(truth)? {
            matches += 1;
        }
    }
    Ok(matches as f64 / models.len() as f64)
}

impl ValidationReport {
    pub fn to_json(&self) -> String {
        let rows: Vec<serde_json::Value> = self
            .scores
            .iter()
            .map(|s| {
                serde_json::json!({
                    "mask": s.mask,
                    "n_terms": s.n_terms,
                    "E_av": finite_or_null(s.e_av),
                    "AIC": opt_json(s.aic),
                    "BIC": opt_json(s.bic),
                    "dAIC": opt_json(s.d_aic),
                    "dBIC": opt_json(s.d_bic),
                    "pareto": s.pareto,
                    "note": s.note,
                })
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({
            "S": self.s_used,
            "M": self.m_scored,
            "lyapunov_time": finite_or_null(self.lyapunov_time),
            "stencil_order": self.stencil_order,
            "subsample_seed": self.subsample_seed,
            "models": rows,
        }))
        .expect("valid json")
    }
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::Value::Null
    }
}

fn opt_json(v: Option<f64>) -> serde_json::Value {
    match v {
        Some(x) => finite_or_null(x),
        None => serde_json::Value::Null,
    }
}

/// Spearman rank correlation with average ranks for ties, plus the one-sided
/// p-value for a negative trend (Student-t approximation).
pub fn spearman_negative_trend(pairs: &[(f64, f64)]) -> (f64, f64) {
    let n = pairs.len();
    if n < 3 {
        return (0.0, 1.0);
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let rx = average_ranks(&xs);
    let ry = average_ranks(&ys);
    let mean = (n as f64 + 1.0) / 2.0;
    let mut num = 0.0;
    let mut den_x = 0.0;
    let mut den_y = 0.0;
    for i in 0..n {
        let a = rx[i] - mean;
        let b = ry[i] - mean;
        num += a * b;
        den_x += a * a;
        den_y += b * b;
    }
    if den_x == 0.0 || den_y == 0.0 {
        return (0.0, 1.0);
    }
    let rho: f64 = num / (den_x * den_y).sqrt();
    let rho_c = rho.clamp(-0.999_999_999, 0.999_999_999);
    let df = (n - 2) as f64;
    let t = rho_c * (df / (1.0 - rho_c * rho_c)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid dof");
    (rho, dist.cdf(t))
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}
