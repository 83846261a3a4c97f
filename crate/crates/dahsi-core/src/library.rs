//! Candidate function libraries: ordered monomial bases over the state space.

use crate::error::DahsiError;
use crate::Result;

/// One basis function: a monomial given by its exponent vector.
///
/// `exponents[k]` is the power of state variable `k`; the all-zero vector is
/// the constant term. `nonzero` caches the (index, power) pairs for fast
/// evaluation and differentiation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Term {
    exponents: Vec<u8>,
    nonzero: Vec<(usize, u8)>,
}

impl Term {
    pub fn new(exponents: Vec<u8>) -> Self {
        let nonzero = exponents
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > 0)
            .map(|(k, &e)| (k, e))
            .collect();
        Self { exponents, nonzero }
    }

    pub fn exponents(&self) -> &[u8] {
        &self.exponents
    }

    /// Cached (variable index, power) pairs of the nonzero exponents.
    pub fn nonzero(&self) -> &[(usize, u8)] {
        &self.nonzero
    }

    pub fn total_degree(&self) -> usize {
        self.exponents.iter().map(|&e| e as usize).sum()
    }

    /// Value of the monomial at `x`.
    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut v = 1.0;
        for &(k, e) in &self.nonzero {
            v *= x[k].powi(e as i32);
        }
        v
    }

    /// Partial derivative with respect to variable `l` at `x`.
    #[inline]
    pub fn partial(&self, x: &[f64], l: usize) -> f64 {
        let el = self.exponents[l];
        if el == 0 {
            return 0.0;
        }
        let mut v = el as f64;
        for &(k, e) in &self.nonzero {
            let p = if k == l { e - 1 } else { e };
            if p > 0 {
                v *= x[k].powi(p as i32);
            }
        }
        v
    }

    /// Human-readable name, e.g. `1`, `x`, `xz`, `x^2`, with the given
    /// variable names.
    pub fn name(&self, vars: &[String]) -> String {
        if self.nonzero.is_empty() {
            return "1".to_string();
        }
        let mut s = String::new();
        for &(k, e) in &self.nonzero {
            s.push_str(&vars[k]);
            if e > 1 {
                s.push('^');
                s.push_str(&e.to_string());
            }
        }
        s
    }
}

/// Ordered library of candidate scalar functions over a `D`-dimensional state.
///
/// Terms are kept in graded-lexicographic order: ascending total degree, and
/// within a degree block descending lexicographic exponent vectors, so the
/// full degree-two basis in three variables reads
/// `1, x, y, z, x^2, xy, xz, y^2, yz, z^2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionLibrary {
    dimension: usize,
    degree: usize,
    basis: Vec<Term>,
}

/// Variable names used for rendering: `x, y, z` up to three dimensions,
/// `x1..xD` beyond that.
pub fn variable_names(dimension: usize) -> Vec<String> {
    if dimension <= 3 {
        ["x", "y", "z"][..dimension]
            .iter()
            .map(|s| s.to_string())
            .collect()
    } else {
        (1..=dimension).map(|k| format!("x{k}")).collect()
    }
}

/// All monomials of total degree at most `degree` in `dimension` variables,
/// graded-lex ordered. The count is C(dimension + degree, degree).
pub fn build_monomial_library(dimension: usize, degree: usize) -> FunctionLibrary {
    assert!(dimension >= 1, "need at least one state variable");
    let mut exps: Vec<Vec<u8>> = Vec::new();
    let mut current = vec![0u8; dimension];
    enumerate_exponents(dimension, degree, 0, degree, &mut current, &mut exps);
    exps.sort_by(|a, b| {
        let da: usize = a.iter().map(|&e| e as usize).sum();
        let db: usize = b.iter().map(|&e| e as usize).sum();
        da.cmp(&db).then_with(|| b.cmp(a))
    });
    FunctionLibrary {
        dimension,
        degree,
        basis: exps.into_iter().map(Term::new).collect(),
    }
}

fn enumerate_exponents(
    dimension: usize,
    degree: usize,
    var: usize,
    remaining: usize,
    current: &mut Vec<u8>,
    out: &mut Vec<Vec<u8>>,
) {
    if var == dimension {
        out.push(current.clone());
        return;
    }
    for e in 0..=remaining {
        current[var] = e as u8;
        enumerate_exponents(dimension, degree, var + 1, remaining - e, current, out);
    }
    current[var] = 0;
}

impl FunctionLibrary {
    /// Library from explicit exponent vectors, keeping the given order.
    /// Duplicates are rejected. An empty basis is allowed.
    pub fn from_exponents(dimension: usize, exps: Vec<Vec<u8>>) -> Result<Self> {
        assert!(dimension >= 1, "need at least one state variable");
        for (i, e) in exps.iter().enumerate() {
            if e.len() != dimension {
                return Err(DahsiError::Msg(format!(
                    "exponent vector {i} has length {} but dimension is {dimension}",
                    e.len()
                )));
            }
            if exps[..i].contains(e) {
                return Err(DahsiError::Msg(format!("duplicate exponent vector {e:?}")));
            }
        }
        let degree = exps
            .iter()
            .map(|e| e.iter().map(|&v| v as usize).sum())
            .max()
            .unwrap_or(0);
        Ok(Self {
            dimension,
            degree,
            basis: exps.into_iter().map(Term::new).collect(),
        })
    }

    /// Subset of this library keeping only the named terms, in this
    /// library's order. Unknown names are an error.
    pub fn subset_by_names(&self, names: &[&str]) -> Result<Self> {
        let vars = variable_names(self.dimension);
        for name in names {
            if !self.basis.iter().any(|t| t.name(&vars) == *name) {
                return Err(DahsiError::UnknownTerm(name.to_string()));
            }
        }
        let basis: Vec<Term> = self
            .basis
            .iter()
            .filter(|t| names.contains(&t.name(&vars).as_str()))
            .cloned()
            .collect();
        let degree = basis.iter().map(Term::total_degree).max().unwrap_or(0);
        Ok(Self {
            dimension: self.dimension,
            degree,
            basis,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of basis functions `q`.
    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn terms(&self) -> &[Term] {
        &self.basis
    }

    pub fn term_names(&self) -> Vec<String> {
        let vars = variable_names(self.dimension);
        self.basis.iter().map(|t| t.name(&vars)).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        let vars = variable_names(self.dimension);
        self.basis.iter().position(|t| t.name(&vars) == name)
    }

    /// Evaluate every basis function at `x` into `out` (length `q`).
    #[inline]
    pub fn eval_basis_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dimension);
        debug_assert_eq!(out.len(), self.basis.len());
        for (o, t) in out.iter_mut().zip(&self.basis) {
            *o = t.eval(x);
        }
    }

    pub fn eval_basis(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.basis.len()];
        self.eval_basis_into(x, &mut out);
        out
    }

    /// Accumulate `out[l] += sum_j weights[j] * d(theta_j)/dx_l` at `x`.
    ///
    /// This is the basis-gradient contraction used by Jacobian-transpose
    /// products in the action gradient.
    #[inline]
    pub fn add_weighted_basis_gradients(&self, x: &[f64], weights: &[f64], out: &mut [f64]) {
        for (j, t) in self.basis.iter().enumerate() {
            let w = weights[j];
            if w == 0.0 {
                continue;
            }
            for &(l, _) in &t.nonzero {
                out[l] += w * t.partial(x, l);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binom(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn three_var_degree_two_order() {
        let lib = build_monomial_library(3, 2);
        assert_eq!(lib.len(), 10);
        assert_eq!(
            lib.term_names(),
            vec!["1", "x", "y", "z", "x^2", "xy", "xz", "y^2", "yz", "z^2"]
        );
    }

    #[test]
    fn constant_only_library() {
        let lib = build_monomial_library(1, 0);
        assert_eq!(lib.len(), 1);
        assert_eq!(lib.term_names(), vec!["1"]);
    }

    #[test]
    fn two_var_degree_two_count() {
        // independent oracle: count through the closed form C(D+d, d)
        let lib = build_monomial_library(2, 2);
        assert_eq!(lib.len(), 6);
        assert_eq!(lib.len(), binom(4, 2));
    }

    #[test]
    fn counts_match_closed_form() {
        for d in 1..=6 {
            for deg in 0..=3 {
                let lib = build_monomial_library(d, deg);
                assert_eq!(lib.len(), binom(d + deg, deg), "D={d} degree={deg}");
            }
        }
    }

    #[test]
    fn no_duplicate_exponents() {
        let lib = build_monomial_library(4, 3);
        for (i, t) in lib.terms().iter().enumerate() {
            for u in &lib.terms()[..i] {
                assert_ne!(t.exponents(), u.exponents());
            }
        }
    }

    #[test]
    fn basis_values_at_reference_points() {
        let lib = build_monomial_library(3, 2);
        assert_eq!(
            lib.eval_basis(&[0.0, 0.0, 0.0]),
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(lib.eval_basis(&[1.0, 1.0, 1.0]), vec![1.0; 10]);
        // hand substitution at (2, 3, 5)
        assert_eq!(
            lib.eval_basis(&[2.0, 3.0, 5.0]),
            vec![1.0, 2.0, 3.0, 5.0, 4.0, 6.0, 10.0, 9.0, 15.0, 25.0]
        );
    }

    #[test]
    fn partials_match_finite_differences() {
        let lib = build_monomial_library(3, 3);
        let x = [1.3, -0.7, 2.1];
        let h = 1e-6;
        for t in lib.terms() {
            for l in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[l] += h;
                xm[l] -= h;
                let fd = (t.eval(&xp) - t.eval(&xm)) / (2.0 * h);
                assert!(
                    (t.partial(&x, l) - fd).abs() < 1e-6 * (1.0 + fd.abs()),
                    "term {:?} var {l}",
                    t.exponents()
                );
            }
        }
    }

    #[test]
    fn subset_keeps_order_and_rejects_unknown() {
        let lib = build_monomial_library(3, 2);
        let sub = lib.subset_by_names(&["1", "x", "y", "z", "x^2", "xz"]).unwrap();
        assert_eq!(sub.term_names(), vec!["1", "x", "y", "z", "x^2", "xz"]);
        assert!(lib.subset_by_names(&["w"]).is_err());
    }

    #[test]
    fn generic_variable_names_beyond_three() {
        let lib = build_monomial_library(4, 1);
        assert_eq!(lib.term_names(), vec!["1", "x1", "x2", "x3", "x4"]);
    }

    #[test]
    fn empty_library_is_allowed() {
        let lib = FunctionLibrary::from_exponents(3, vec![]).unwrap();
        assert!(lib.is_empty());
        assert_eq!(lib.degree(), 0);
    }
}
