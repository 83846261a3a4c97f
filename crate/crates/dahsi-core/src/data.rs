//! Measured time series on a uniform grid, and the CSV + sidecar artifacts.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::DahsiError;
use crate::mat::Mat;
use crate::model::fmt_f64;
use crate::Result;

/// Measurements `Y` on a uniform time grid, with the map back to state slots.
///
/// `measured_indices[l]` is the state variable observed by column `l`; any
/// state slot not listed is hidden. Synthetic datasets carry their noise
/// level and seed so experiments can be reproduced from the files alone.
#[derive(Debug, Clone)]
pub struct Dataset {
    values: Mat, // N x L
    measured_indices: Vec<usize>,
    t0: f64,
    dt: f64,
    omega: Option<f64>,
    seed: Option<u64>,
    rescale: f64,
}

/// Sidecar metadata written next to the CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub dt: f64,
    pub measured_indices: Vec<usize>,
    pub omega: Option<f64>,
    pub seed: Option<u64>,
    pub rescale: f64,
}

impl Dataset {
    /// In-memory constructor; times start at zero. At least five points, and
    /// the measured indices must be distinct.
    pub fn new(values: Mat, measured_indices: Vec<usize>, dt: f64) -> Result<Self> {
        if values.rows() < 5 {
            return Err(DahsiError::InvalidData(format!(
                "need at least 5 time points, got {}",
                values.rows()
            )));
        }
        if values.cols() != measured_indices.len() {
            return Err(DahsiError::InvalidData(
                "one measured index per column required".into(),
            ));
        }
        for (i, idx) in measured_indices.iter().enumerate() {
            if measured_indices[..i].contains(idx) {
                return Err(DahsiError::InvalidData(format!(
                    "duplicate measured index {idx}"
                )));
            }
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(DahsiError::InvalidData("time step must be positive".into()));
        }
        Ok(Self {
            values,
            measured_indices,
            t0: 0.0,
            dt,
            omega: None,
            seed: None,
            rescale: 1.0,
        })
    }

    pub fn with_noise_metadata(mut self, omega: f64, seed: u64) -> Self {
        self.omega = Some(omega);
        self.seed = Some(seed);
        self
    }

    pub fn n_rows(&self) -> usize {
        self.values.rows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.cols()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn measured_indices(&self) -> &[usize] {
        &self.measured_indices
    }

    pub fn omega(&self) -> Option<f64> {
        self.omega
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn rescale(&self) -> f64 {
        self.rescale
    }

    /// Contiguous row slice `[start, start+len)` as a new dataset.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Dataset> {
        if start + len > self.n_rows() {
            return Err(DahsiError::InvalidData(format!(
                "slice {start}..{} out of {} rows",
                start + len,
                self.n_rows()
            )));
        }
        let mut values = Mat::zeros(len, self.n_cols());
        for i in 0..len {
            values.row_mut(i).copy_from_slice(self.values.row(start + i));
        }
        let mut out = Dataset::new(values, self.measured_indices.clone(), self.dt)?;
        out.t0 = self.time(start);
        out.omega = self.omega;
        out.seed = self.seed;
        out.rescale = self.rescale;
        Ok(out)
    }

    /// Keep every `k`-th row, multiplying the step accordingly.
    pub fn decimate(&self, k: usize) -> Result<Dataset> {
        assert!(k >= 1);
        let n = (self.n_rows() + k - 1) / k;
        let mut values = Mat::zeros(n, self.n_cols());
        for i in 0..n {
            values.row_mut(i).copy_from_slice(self.values.row(i * k));
        }
        let mut out = Dataset::new(values, self.measured_indices.clone(), self.dt * k as f64)?;
        out.t0 = self.t0;
        out.omega = self.omega;
        out.seed = self.seed;
        out.rescale = self.rescale;
        Ok(out)
    }

    fn sidecar(&self) -> Sidecar {
        Sidecar {
            dt: self.dt,
            measured_indices: self.measured_indices.clone(),
            omega: self.omega,
            seed: self.seed,
            rescale: self.rescale,
        }
    }

    /// Write the CSV (`t,y1,...,yL`) and its JSON sidecar.
    pub fn write_csv(&self, csv_path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push('t');
        for l in 1..=self.n_cols() {
            out.push_str(&format!(",y{l}"));
        }
        out.push('\n');
        for i in 0..self.n_rows() {
            out.push_str(&fmt_f64(self.time(i)));
            for v in self.values.row(i) {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
        let mut f = std::fs::File::create(csv_path)?;
        f.write_all(out.as_bytes())?;
        let sc = serde_json::to_string_pretty(&self.sidecar())?;
        std::fs::write(sidecar_path(csv_path), sc)?;
        Ok(())
    }
}

/// Sidecar path convention: `foo.csv` -> `foo.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Read a dataset from CSV plus sidecar.
///
/// The header must be `t,y1,...,yL`. Cells must be finite, the grid uniform
/// to a relative jitter of 1e-9. A missing sidecar falls back to defaults
/// (columns observe slots `0..L`, rescale 1) with a warning on stderr. The
/// sidecar's rescale factor divides the time axis at ingestion.
pub fn ingest_csv(csv_path: &Path, sidecar: Option<&Path>) -> Result<Dataset> {
    let text = std::fs::read_to_string(csv_path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| DahsiError::InvalidData("empty csv".into()))?;
    let fields: Vec<&str> = header.split(',').map(str::trim).collect();
    if fields.is_empty() || fields[0] != "t" {
        return Err(DahsiError::InvalidData(format!(
            "bad header `{header}`: expected `t,y1,...,yL`"
        )));
    }
    let l = fields.len() - 1;
    for (i, f) in fields[1..].iter().enumerate() {
        if *f != format!("y{}", i + 1) {
            return Err(DahsiError::InvalidData(format!(
                "bad header column `{f}`: expected `y{}`",
                i + 1
            )));
        }
    }
    if l == 0 {
        return Err(DahsiError::InvalidData("csv has no measurement columns".into()));
    }

    let mut times = Vec::new();
    let mut rows = Vec::new();
    for (row_idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != l + 1 {
            return Err(DahsiError::InvalidData(format!(
                "row {row_idx}: expected {} cells, got {}",
                l + 1,
                cells.len()
            )));
        }
        let mut parsed = Vec::with_capacity(l + 1);
        for (col, cell) in cells.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| DahsiError::NonFiniteCell { row: row_idx, col })?;
            if !v.is_finite() {
                return Err(DahsiError::NonFiniteCell { row: row_idx, col });
            }
            parsed.push(v);
        }
        times.push(parsed[0]);
        rows.extend_from_slice(&parsed[1..]);
    }
    let n = times.len();
    if n < 5 {
        return Err(DahsiError::InvalidData(format!(
            "need at least 5 time points, got {n}"
        )));
    }

    let dt_raw = (times[n - 1] - times[0]) / (n - 1) as f64;
    if !(dt_raw.is_finite() && dt_raw > 0.0) {
        return Err(DahsiError::InvalidData("time axis is not increasing".into()));
    }
    for i in 0..n - 1 {
        let step = times[i + 1] - times[i];
        let jitter = (step - dt_raw).abs() / dt_raw;
        if jitter > 1e-9 {
            return Err(DahsiError::NonUniformGrid { row: i + 1, jitter });
        }
    }

    let default_sidecar = sidecar_path(csv_path);
    let sc_path = sidecar.unwrap_or(&default_sidecar);
    let sc: Sidecar = if sc_path.exists() {
        serde_json::from_str(&std::fs::read_to_string(sc_path)?)?
    } else {
        eprintln!(
            "warning: sidecar {} not found; assuming columns observe slots 0..{l}",
            sc_path.display()
        );
        Sidecar {
            dt: dt_raw,
            measured_indices: (0..l).collect(),
            omega: None,
            seed: None,
            rescale: 1.0,
        }
    };
    if sc.measured_indices.len() != l {
        return Err(DahsiError::InvalidData(format!(
            "sidecar lists {} measured indices for {l} columns",
            sc.measured_indices.len()
        )));
    }
    if !(sc.rescale.is_finite() && sc.rescale > 0.0) {
        return Err(DahsiError::InvalidData("rescale factor must be positive".into()));
    }

    let mut ds = Dataset::new(Mat::from_vec(n, l, rows), sc.measured_indices, dt_raw / sc.rescale)?;
    ds.t0 = times[0] / sc.rescale;
    ds.omega = sc.omega;
    ds.seed = sc.seed;
    ds.rescale = sc.rescale;
    Ok(ds)
}
