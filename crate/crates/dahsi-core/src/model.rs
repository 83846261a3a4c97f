//! Sparse candidate models: a sparsity mask plus a parameter matrix over a
//! function library, with evaluation, rendering, and the JSON model artifact.

use std::sync::Arc;

use crate::error::DahsiError;
use crate::library::{variable_names, FunctionLibrary};
use crate::mat::Mat;
use crate::Result;

/// One candidate ODE system: `dx_k/dt = sum_j p[k][j] * theta_j(X)`.
///
/// The mask and the parameter matrix are kept consistent: an entry is masked
/// exactly when its parameter is nonzero, so two models with the same mask
/// name the same structure regardless of their fitted values.
#[derive(Debug, Clone)]
pub struct CandidateModel {
    library: Arc<FunctionLibrary>,
    params: Mat, // D x q
    mask: Vec<bool>,
}

impl CandidateModel {
    /// Build from a dense parameter matrix; the mask is the nonzero pattern.
    pub fn from_params(library: Arc<FunctionLibrary>, params: Mat) -> Self {
        assert_eq!(params.rows(), library.dimension());
        assert_eq!(params.cols(), library.len());
        let mask = params.as_slice().iter().map(|&p| p != 0.0).collect();
        Self {
            library,
            params,
            mask,
        }
    }

    /// Build from parameters and an explicit mask; masked-out entries are
    /// forced to exactly zero, and entries that are zero anyway drop out of
    /// the mask.
    pub fn with_mask(library: Arc<FunctionLibrary>, mut params: Mat, mask: &[bool]) -> Self {
        assert_eq!(mask.len(), params.rows() * params.cols());
        for (p, &m) in params.as_mut_slice().iter_mut().zip(mask) {
            if !m {
                *p = 0.0;
            }
        }
        Self::from_params(library, params)
    }

    /// The all-zero model over a library.
    pub fn zero(library: Arc<FunctionLibrary>) -> Self {
        let params = Mat::zeros(library.dimension(), library.len());
        Self::from_params(library, params)
    }

    pub fn library(&self) -> &Arc<FunctionLibrary> {
        &self.library
    }

    pub fn dimension(&self) -> usize {
        self.library.dimension()
    }

    pub fn params(&self) -> &Mat {
        &self.params
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Number of active terms `N_p`.
    pub fn term_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Velocity vector at state `x`, written into `out` (length `D`).
    #[inline]
    pub fn rhs_into(&self, x: &[f64], basis_buf: &mut [f64], out: &mut [f64]) {
        self.library.eval_basis_into(x, basis_buf);
        rhs_from_basis(&self.params, basis_buf, out);
    }

    pub fn rhs(&self, x: &[f64]) -> Vec<f64> {
        let mut basis = vec![0.0; self.library.len()];
        let mut out = vec![0.0; self.dimension()];
        self.rhs_into(x, &mut basis, &mut out);
        out
    }

    /// True iff both models share a library and have identical masks;
    /// parameter values are ignored.
    pub fn structure_match(&self, other: &CandidateModel) -> Result<bool> {
        if self.library.as_ref() != other.library.as_ref() {
            return Err(DahsiError::LibraryMismatch);
        }
        Ok(self.mask == other.mask)
    }

    /// Render the system as one `d<var>/dt = ...` line per equation.
    pub fn to_text(&self) -> String {
        let vars = variable_names(self.dimension());
        let names = self.library.term_names();
        let q = self.library.len();
        let mut lines = Vec::with_capacity(self.dimension());
        for k in 0..self.dimension() {
            let mut rhs = String::new();
            for j in 0..q {
                if !self.mask[k * q + j] {
                    continue;
                }
                let c = self.params.at(k, j);
                if rhs.is_empty() {
                    rhs.push_str(&format!("{c}"));
                } else if c < 0.0 {
                    rhs.push_str(&format!(" - {}", -c));
                } else {
                    rhs.push_str(&format!(" + {c}"));
                }
                if names[j] != "1" {
                    rhs.push(' ');
                    rhs.push_str(&names[j]);
                }
            }
            if rhs.is_empty() {
                rhs.push('0');
            }
            lines.push(format!("d{}/dt = {}", vars[k], rhs));
        }
        lines.join("\n")
    }

    /// Serialize to the model JSON artifact. Floats carry 17 significant
    /// digits so a round-trip reproduces them bit-exactly.
    pub fn to_json(&self) -> String {
        let q = self.library.len();
        let d = self.dimension();
        let mut s = String::new();
        s.push_str("{\n");
        s.push_str(&format!("  \"dimension\": {d},\n"));
        s.push_str(&format!("  \"degree\": {},\n", self.library.degree()));
        s.push_str("  \"basis\": [");
        for (j, t) in self.library.terms().iter().enumerate() {
            if j > 0 {
                s.push_str(", ");
            }
            s.push('[');
            for (k, e) in t.exponents().iter().enumerate() {
                if k > 0 {
                    s.push_str(", ");
                }
                s.push_str(&e.to_string());
            }
            s.push(']');
        }
        s.push_str("],\n");
        s.push_str("  \"mask\": [\n");
        for k in 0..d {
            s.push_str("    [");
            for j in 0..q {
                if j > 0 {
                    s.push_str(", ");
                }
                s.push_str(if self.mask[k * q + j] { "true" } else { "false" });
            }
            s.push_str(if k + 1 < d { "],\n" } else { "]\n" });
        }
        s.push_str("  ],\n");
        s.push_str("  \"params\": [\n");
        for k in 0..d {
            s.push_str("    [");
            for j in 0..q {
                if j > 0 {
                    s.push_str(", ");
                }
                s.push_str(&fmt_f64(self.params.at(k, j)));
            }
            s.push_str(if k + 1 < d { "],\n" } else { "]\n" });
        }
        s.push_str("  ]\n}\n");
        s
    }

    /// Parse the model JSON artifact.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let dimension = v["dimension"]
            .as_u64()
            .ok_or_else(|| DahsiError::Msg("model json: missing dimension".into()))?
            as usize;
        let basis = v["basis"]
            .as_array()
            .ok_or_else(|| DahsiError::Msg("model json: missing basis".into()))?;
        let exps: Vec<Vec<u8>> = basis
            .iter()
            .map(|row| {
                row.as_array()
                    .ok_or_else(|| DahsiError::Msg("model json: bad basis row".into()))?
                    .iter()
                    .map(|e| {
                        e.as_u64()
                            .map(|u| u as u8)
                            .ok_or_else(|| DahsiError::Msg("model json: bad exponent".into()))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let library = Arc::new(FunctionLibrary::from_exponents(dimension, exps)?);
        let q = library.len();
        let parse_rows = |key: &str| -> Result<Vec<Vec<serde_json::Value>>> {
            v[key]
                .as_array()
                .ok_or_else(|| DahsiError::Msg(format!("model json: missing {key}")))?
                .iter()
                .map(|r| {
                    r.as_array()
                        .cloned()
                        .ok_or_else(|| DahsiError::Msg(format!("model json: bad {key} row")))
                })
                .collect()
        };
        let mask_rows = parse_rows("mask")?;
        let param_rows = parse_rows("params")?;
        if mask_rows.len() != dimension || param_rows.len() != dimension {
            return Err(DahsiError::Msg("model json: row count mismatch".into()));
        }
        let mut params = Mat::zeros(dimension, q);
        let mut mask = vec![false; dimension * q];
        for k in 0..dimension {
            if mask_rows[k].len() != q || param_rows[k].len() != q {
                return Err(DahsiError::Msg("model json: column count mismatch".into()));
            }
            for j in 0..q {
                mask[k * q + j] = mask_rows[k][j]
                    .as_bool()
                    .ok_or_else(|| DahsiError::Msg("model json: bad mask entry".into()))?;
                *params.at_mut(k, j) = param_rows[k][j]
                    .as_f64()
                    .ok_or_else(|| DahsiError::Msg("model json: bad param entry".into()))?;
            }
        }
        Ok(Self::with_mask(library, params, &mask))
    }
}

/// `out[k] = sum_j params[k][j] * basis[j]` without re-evaluating the basis.
#[inline]
pub fn rhs_from_basis(params: &Mat, basis: &[f64], out: &mut [f64]) {
    let q = params.cols();
    for (k, o) in out.iter_mut().enumerate() {
        let row = params.row(k);
        let mut acc = 0.0;
        for j in 0..q {
            acc += row[j] * basis[j];
        }
        *o = acc;
    }
}

/// 17 significant digits: enough to round-trip any f64 through text.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
