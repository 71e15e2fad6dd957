//! Linear-Gaussian filter over the centered flow volumes.
//!
//! The state transition is `F = diag(rho)` with process covariance
//! `Q = diag(noise_var)`. The measurement matrix is the identity restricted
//! to the flows observed in a slot; the measurement covariance is diagonal
//! with each flow's combined-estimator variance, evaluated at the predicted
//! volume since the true volume is unknown at filtering time. Unobserved
//! flows carry infinite variance and are dropped from the update.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::FlowModel;
use crate::error::{Error, Result};
use crate::routing::RoutingMatrix;
use crate::sampling::{combined_variance_coeff, SamplingPlan};

/// Tolerance on `|P - P^T|` accepted by [`KalmanState::check`].
pub const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Floor on the predicted volume used to evaluate measurement noise.
    pub volume_floor: f64,
    /// Floor on a finite measurement variance (exact observations).
    pub variance_floor: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            volume_floor: 1.0,
            variance_floor: 1e-9,
        }
    }
}

/// Filtered mean and covariance of the centered flow volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// One-step-ahead prediction of the centered flow volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Diagonal measurement covariance; `+inf` marks an unobserved flow.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementNoise {
    variances: Vec<f64>,
}

impl MeasurementNoise {
    pub fn new(variances: Vec<f64>) -> Result<Self> {
        if let Some(v) = variances.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::InvalidPlan(format!(
                "measurement variance {v} must be positive or infinite"
            )));
        }
        Ok(Self { variances })
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }
}

impl KalmanState {
    /// Initial state from the model's initial-state distribution.
    pub fn from_model(model: &FlowModel) -> Self {
        let mean = DVector::from_iterator(
            model.n_flows(),
            model
                .init_mean()
                .iter()
                .zip(model.mean())
                .map(|(x0, m)| x0 - m),
        );
        let cov = DMatrix::from_diagonal(&DVector::from_column_slice(model.init_var()));
        Self { mean, cov }
    }

    pub fn n_flows(&self) -> usize {
        self.mean.len()
    }

    /// Uncentered estimates, not clamped.
    pub fn volumes(&self, model: &FlowModel) -> Vec<f64> {
        self.mean
            .iter()
            .zip(model.mean())
            .map(|(c, m)| c + m)
            .collect()
    }

    /// Uncentered estimates clamped at zero, as reported.
    pub fn estimates(&self, model: &FlowModel) -> Vec<f64> {
        self.volumes(model)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect()
    }

    /// Symmetry within [`SYMMETRY_TOL`] and a nonnegative diagonal.
    pub fn check(&self) -> bool {
        is_valid_cov(&self.cov)
    }
}

fn is_valid_cov(cov: &DMatrix<f64>) -> bool {
    let n = cov.nrows();
    (0..n).all(|i| cov[(i, i)] >= 0.0)
        && (0..n).all(|i| (0..i).all(|k| (cov[(i, k)] - cov[(k, i)]).abs() <= SYMMETRY_TOL))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for k in 0..i {
            let avg = 0.5 * (m[(i, k)] + m[(k, i)]);
            m[(i, k)] = avg;
            m[(k, i)] = avg;
        }
    }
}

/// `mean' = F mean`, `cov' = Q + F cov F^T`.
pub fn predict(state: &KalmanState, model: &FlowModel) -> Result<Prediction> {
    let n = model.n_flows();
    if state.n_flows() != n || state.cov.nrows() != n || state.cov.ncols() != n {
        return Err(Error::dims("predict", n, state.n_flows()));
    }
    let rho = model.rho();
    let mean = DVector::from_iterator(n, state.mean.iter().zip(rho).map(|(c, r)| r * c));
    let mut cov = DMatrix::from_fn(n, n, |i, k| rho[i] * state.cov[(i, k)] * rho[k]);
    for (i, q) in model.noise_var().iter().enumerate() {
        cov[(i, i)] += q;
    }
    symmetrize(&mut cov);
    Ok(Prediction { mean, cov })
}

/// Measurement variances for each flow under `plan`, evaluated at the
/// predicted uncentered volume floored at `cfg.volume_floor`.
pub fn measurement_noise(
    pred: &Prediction,
    plan: &SamplingPlan,
    model: &FlowModel,
    routing: &RoutingMatrix,
    cfg: &FilterConfig,
) -> Result<MeasurementNoise> {
    plan.check_dims(routing)?;
    let n = routing.n_flows();
    if pred.mean.len() != n || model.n_flows() != n {
        return Err(Error::dims("measurement_noise", n, pred.mean.len()));
    }
    let variances = (0..n)
        .map(|j| {
            let coeff = combined_variance_coeff(&plan.path_rates(routing, j)?);
            Ok(if coeff.is_infinite() {
                f64::INFINITY
            } else {
                let proxy = (pred.mean[j] + model.mean()[j]).max(cfg.volume_floor);
                (proxy * coeff).max(cfg.variance_floor)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MeasurementNoise::new(variances)
}

/// Measurement update on the observed subset of flows.
///
/// `z` holds centered observations, `None` for unobserved flows, which must
/// be exactly the flows with infinite noise. Returns the new state and the
/// gain matrix (one column per observed flow, in index order).
pub fn update_with_gain(
    pred: &Prediction,
    z: &[Option<f64>],
    noise: &MeasurementNoise,
    step: usize,
) -> Result<(KalmanState, DMatrix<f64>)> {
    let n = pred.mean.len();
    if z.len() != n {
        return Err(Error::dims("update observations", n, z.len()));
    }
    if noise.variances.len() != n {
        return Err(Error::dims("update noise", n, noise.variances.len()));
    }
    let mut observed = Vec::new();
    for (j, (zj, v)) in z.iter().zip(&noise.variances).enumerate() {
        match (zj, v.is_finite()) {
            (Some(_), true) => observed.push(j),
            (None, false) => {}
            _ => {
                return Err(Error::InvalidPlan(format!(
                    "flow {j}: observation presence does not match its noise variance {v}"
                )))
            }
        }
    }
    let m = observed.len();
    if m == 0 {
        return Ok((
            KalmanState {
                mean: pred.mean.clone(),
                cov: pred.cov.clone(),
            },
            DMatrix::zeros(n, 0),
        ));
    }

    // S = H P H^T + R, restricted to the observed flows
    let mut s = DMatrix::from_fn(m, m, |a, b| pred.cov[(observed[a], observed[b])]);
    for (a, &j) in observed.iter().enumerate() {
        s[(a, a)] += noise.variances[j];
    }
    let chol = s.cholesky().ok_or_else(|| Error::Numerical {
        step,
        reason: "innovation covariance is not positive definite".into(),
    })?;
    // K^T = S^-1 H P, since P and S are symmetric
    let hp = DMatrix::from_fn(m, n, |a, k| pred.cov[(observed[a], k)]);
    let gain_t = chol.solve(&hp);
    let innovation =
        DVector::from_iterator(m, observed.iter().map(|&j| z[j].unwrap() - pred.mean[j]));
    let gain = gain_t.transpose();
    let mean = &pred.mean + &gain * innovation;
    let mut cov = &pred.cov - &gain * hp;
    symmetrize(&mut cov);
    if mean.iter().any(|v| !v.is_finite()) || cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            step,
            reason: "non-finite state after update".into(),
        });
    }
    Ok((KalmanState { mean, cov }, gain))
}

pub fn update(
    pred: &Prediction,
    z: &[Option<f64>],
    noise: &MeasurementNoise,
    step: usize,
) -> Result<KalmanState> {
    update_with_gain(pred, z, noise, step).map(|(s, _)| s)
}

/// predict, build the measurement noise, center the observations, update.
///
/// Returns the new state and the reported (uncentered, clamped) estimates.
pub fn filter_step(
    state: &KalmanState,
    model: &FlowModel,
    plan: &SamplingPlan,
    z_uncentered: &[Option<f64>],
    routing: &RoutingMatrix,
    cfg: &FilterConfig,
    step: usize,
) -> Result<(KalmanState, Vec<f64>)> {
    let pred = predict(state, model)?;
    let noise = measurement_noise(&pred, plan, model, routing, cfg)?;
    if z_uncentered.len() != model.n_flows() {
        return Err(Error::dims(
            "filter_step",
            model.n_flows(),
            z_uncentered.len(),
        ));
    }
    let z: Vec<Option<f64>> = z_uncentered
        .iter()
        .zip(model.mean())
        .map(|(zj, m)| zj.map(|v| v - m))
        .collect();
    let next = update(&pred, &z, &noise, step)?;
    let estimates = next.estimates(model);
    Ok((next, estimates))
}

/// A running filter: model, current state, and step counter.
#[derive(Debug, Clone)]
pub struct FlowFilter {
    model: FlowModel,
    state: KalmanState,
    cfg: FilterConfig,
    step: usize,
}

impl FlowFilter {
    pub fn new(model: FlowModel, cfg: FilterConfig) -> Self {
        let state = KalmanState::from_model(&model);
        Self {
            model,
            state,
            cfg,
            step: 0,
        }
    }

    /// Starts counting steps from `step` (used in error reports).
    pub fn starting_at(mut self, step: usize) -> Self {
        self.step = step;
        self
    }

    pub fn model(&self) -> &FlowModel {
        &self.model
    }

    pub fn state(&self) -> &KalmanState {
        &self.state
    }

    pub fn step(
        &mut self,
        plan: &SamplingPlan,
        routing: &RoutingMatrix,
        z_uncentered: &[Option<f64>],
    ) -> Result<Vec<f64>> {
        let (next, est) = filter_step(
            &self.state,
            &self.model,
            plan,
            z_uncentered,
            routing,
            &self.cfg,
            self.step,
        )?;
        self.state = next;
        self.step += 1;
        Ok(est)
    }

    /// Swaps in a refitted model, keeping the current uncentered estimate
    /// and covariance.
    pub fn replace_model(&mut self, model: FlowModel) -> Result<()> {
        if model.n_flows() != self.model.n_flows() {
            return Err(Error::dims(
                "replace_model",
                self.model.n_flows(),
                model.n_flows(),
            ));
        }
        let volumes = self.state.volumes(&self.model);
        for (j, v) in volumes.into_iter().enumerate() {
            self.state.mean[j] = v - model.mean()[j];
        }
        self.model = model;
        Ok(())
    }
}
