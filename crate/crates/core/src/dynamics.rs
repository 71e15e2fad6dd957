//! Per-flow AR(1) traffic dynamics: synthetic trace generation and
//! method-of-moments calibration from a training window.
//!
//! Each flow is modelled as a centered AR(1) process around a long-run mean,
//! `c[t+1] = rho * c[t] + w[t]`, `w[t] ~ N(0, noise_var)`, reported as
//! `x[t] = max(0, mean + c[t])`. The Kalman filter works on the centered
//! series and adds the mean back when reporting.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::CsvLoadError;
use crate::seeds;

/// Largest |rho| a calibrated model may carry.
pub const RHO_CLAMP: f64 = 0.999;

/// Default floor on a calibrated noise variance.
pub const DEFAULT_VAR_FLOOR: f64 = 1e-6;

/// AR(1) parameters and initial-state distribution for every flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FlowModelRepr")]
pub struct FlowModel {
    rho: Vec<f64>,
    noise_var: Vec<f64>,
    mean: Vec<f64>,
    init_mean: Vec<f64>,
    init_var: Vec<f64>,
}

#[derive(Deserialize)]
struct FlowModelRepr {
    rho: Vec<f64>,
    noise_var: Vec<f64>,
    mean: Vec<f64>,
    init_mean: Vec<f64>,
    init_var: Vec<f64>,
}

impl TryFrom<FlowModelRepr> for FlowModel {
    type Error = Error;
    fn try_from(r: FlowModelRepr) -> Result<Self> {
        FlowModel::new(r.rho, r.noise_var, r.mean, r.init_mean, r.init_var)
    }
}

impl FlowModel {
    pub fn new(
        rho: Vec<f64>,
        noise_var: Vec<f64>,
        mean: Vec<f64>,
        init_mean: Vec<f64>,
        init_var: Vec<f64>,
    ) -> Result<Self> {
        let n = rho.len();
        if n == 0 {
            return Err(Error::InvalidModel("model has no flows".into()));
        }
        for (name, v) in [
            ("noise_var", &noise_var),
            ("mean", &mean),
            ("init_mean", &init_mean),
            ("init_var", &init_var),
        ] {
            if v.len() != n {
                return Err(Error::InvalidModel(format!(
                    "{name} has {} entries, rho has {n}",
                    v.len()
                )));
            }
        }
        for j in 0..n {
            if !(rho[j].abs() < 1.0) {
                return Err(Error::InvalidModel(format!(
                    "rho[{j}] = {} is not stationary",
                    rho[j]
                )));
            }
            if !(noise_var[j] > 0.0 && noise_var[j].is_finite()) {
                return Err(Error::InvalidModel(format!(
                    "noise_var[{j}] = {} must be positive",
                    noise_var[j]
                )));
            }
            if !(init_var[j] > 0.0 && init_var[j].is_finite()) {
                return Err(Error::InvalidModel(format!(
                    "init_var[{j}] = {} must be positive",
                    init_var[j]
                )));
            }
            if !(mean[j] >= 0.0 && mean[j].is_finite()) {
                return Err(Error::InvalidModel(format!(
                    "mean[{j}] = {} must be nonnegative",
                    mean[j]
                )));
            }
            if !init_mean[j].is_finite() {
                return Err(Error::InvalidModel(format!("init_mean[{j}] is not finite")));
            }
        }
        Ok(Self {
            rho,
            noise_var,
            mean,
            init_mean,
            init_var,
        })
    }

    /// Stationary model: starts at the long-run mean with the stationary
    /// variance `noise_var / (1 - rho^2)`.
    pub fn stationary(rho: Vec<f64>, noise_var: Vec<f64>, mean: Vec<f64>) -> Result<Self> {
        let init_var = rho
            .iter()
            .zip(&noise_var)
            .map(|(r, q)| q / (1.0 - r * r))
            .collect();
        let init_mean = mean.clone();
        Self::new(rho, noise_var, mean, init_mean, init_var)
    }

    pub fn n_flows(&self) -> usize {
        self.rho.len()
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn noise_var(&self) -> &[f64] {
        &self.noise_var
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn init_mean(&self) -> &[f64] {
        &self.init_mean
    }

    pub fn init_var(&self) -> &[f64] {
        &self.init_var
    }

    pub fn stationary_var(&self, flow: usize) -> f64 {
        self.noise_var[flow] / (1.0 - self.rho[flow] * self.rho[flow])
    }

    /// Returns a copy with a new initial-state distribution.
    pub fn with_initial(&self, init_mean: Vec<f64>, init_var: Vec<f64>) -> Result<Self> {
        Self::new(
            self.rho.clone(),
            self.noise_var.clone(),
            self.mean.clone(),
            init_mean,
            init_var,
        )
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// `T x J` matrix of realized flow volumes, one row per time slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMatrix {
    n_flows: usize,
    rows: Vec<Vec<f64>>,
}

impl TraceMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_flows = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || n_flows == 0 {
            return Err(Error::InvalidModel("trace is empty".into()));
        }
        for (t, row) in rows.iter().enumerate() {
            if row.len() != n_flows {
                return Err(Error::dims("trace row", n_flows, row.len()));
            }
            if let Some(j) = row.iter().position(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::InvalidModel(format!(
                    "trace value at slot {t}, flow {j} is {}",
                    row[j]
                )));
            }
        }
        Ok(Self { n_flows, rows })
    }

    pub fn n_steps(&self) -> usize {
        self.rows.len()
    }

    pub fn n_flows(&self) -> usize {
        self.n_flows
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.rows[t]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn column(&self, flow: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(move |r| r[flow])
    }

    /// Slots `[start, end)` as a new trace.
    pub fn window(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.rows.len() {
            return Err(Error::IndexOutOfRange {
                kind: "trace slot",
                index: end,
                size: self.rows.len(),
            });
        }
        Self::new(self.rows[start..end].to_vec())
    }

    /// Reads the `t,flow_0,...,flow_{J-1}` CSV format.
    pub fn read_csv<R: Read>(reader: R) -> std::result::Result<Self, CsvLoadError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.get(0).map(str::trim) != Some("t") {
            return Err(CsvLoadError::Format("first column must be `t`".into()));
        }
        for (j, h) in headers.iter().skip(1).enumerate() {
            if h.trim() != format!("flow_{j}") {
                return Err(CsvLoadError::Format(format!(
                    "column {} must be `flow_{j}`, found `{h}`",
                    j + 1
                )));
            }
        }
        let mut rows = Vec::new();
        for (t, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .skip(1)
                .map(|cell| {
                    cell.trim().parse::<f64>().map_err(|_| {
                        CsvLoadError::Format(format!("slot row {t}: `{cell}` is not a number"))
                    })
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Ok(Self::new(rows)?)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file).map_err(|e| e.into_error(path))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.n_flows).map(|j| format!("flow_{j}")));
        w.write_record(&header)?;
        for (t, row) in self.rows.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file).map_err(|e| Error::csv(path, e))
    }
}

/// Draws a `n_steps`-slot trace from `model`.
///
/// Each flow uses its own stream derived from `seed`, so the trace is
/// identical whether flows are generated serially or in parallel.
pub fn simulate(model: &FlowModel, n_steps: usize, seed: u64) -> Result<TraceMatrix> {
    if n_steps == 0 {
        return Err(Error::InvalidModel("n_steps must be at least 1".into()));
    }
    let n = model.n_flows();
    let mut rows = vec![vec![0.0; n]; n_steps];
    for j in 0..n {
        let mut rng = seeds::flow_stream(seed, j);
        let q_sd = model.noise_var[j].sqrt();
        let z0: f64 = rng.sample(StandardNormal);
        let mut c = model.init_mean[j] - model.mean[j] + model.init_var[j].sqrt() * z0;
        for row in rows.iter_mut() {
            row[j] = (model.mean[j] + c).max(0.0);
            let w: f64 = rng.sample(StandardNormal);
            c = model.rho[j] * c + q_sd * w;
        }
    }
    TraceMatrix::new(rows)
}

/// Calibration output: the fitted model plus flows whose training column
/// was constant (fitted with `rho = 0` and the variance floor).
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub model: FlowModel,
    pub constant_flows: Vec<usize>,
}

/// Fits a [`FlowModel`] to a training window by the method of moments.
///
/// Per flow: sample mean; lag-1 autocorrelation of the centered series,
/// clamped to `[-0.999, 0.999]`; innovation variance `(1 - rho^2) * var`
/// floored at `var_floor`; initial state at the last observation with the
/// stationary variance.
pub fn calibrate(training: &TraceMatrix, var_floor: f64) -> Result<Calibration> {
    let t = training.n_steps();
    if t < 10 {
        return Err(Error::Calibration(format!(
            "training window has {t} slots, need at least 10"
        )));
    }
    if !(var_floor > 0.0) {
        return Err(Error::Calibration("variance floor must be positive".into()));
    }
    let n = training.n_flows();
    let mut rho = vec![0.0; n];
    let mut noise_var = vec![var_floor; n];
    let mut mean = vec![0.0; n];
    let mut init_mean = vec![0.0; n];
    let mut init_var = vec![var_floor; n];
    let mut constant_flows = Vec::new();

    for j in 0..n {
        let col: Vec<f64> = training.column(j).collect();
        let m = col.iter().sum::<f64>() / t as f64;
        mean[j] = m;
        init_mean[j] = col[t - 1];

        let gamma0 = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / t as f64;
        // constant up to rounding of the mean
        if gamma0 <= f64::EPSILON * m.abs().max(1.0).powi(2) {
            constant_flows.push(j);
            continue;
        }
        let gamma1 = col.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum::<f64>() / t as f64;
        let r = (gamma1 / gamma0).clamp(-RHO_CLAMP, RHO_CLAMP);
        let q = ((1.0 - r * r) * gamma0).max(var_floor);
        rho[j] = r;
        noise_var[j] = q;
        init_var[j] = q / (1.0 - r * r);
    }

    if constant_flows.len() == n {
        return Err(Error::Calibration(
            "every flow is constant over the training window".into(),
        ));
    }

    Ok(Calibration {
        model: FlowModel::new(rho, noise_var, mean, init_mean, init_var)?,
        constant_flows,
    })
}
