//! Traffic-flow estimation from packet sampling.
//!
//! Flows follow fixed routes over monitored links (`y = R x`). Each link
//! samples each flow's packets at its own rate, and a Kalman filter over
//! per-flow AR(1) models turns the noisy sampled counts into volume
//! estimates. The [`opt`] module chooses rates under per-link budgets to
//! minimize estimation error, and [`harness`] runs end-to-end experiments.

// `!(a > b)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod harness;
pub mod kalman;
pub mod opt;
pub mod routing;
pub mod sampling;
pub mod seeds;

pub use dynamics::{calibrate, simulate, Calibration, FlowModel, TraceMatrix};
pub use error::{Error, Result};
pub use harness::{
    compare, run_experiment, write_outputs, ExperimentConfig, ExperimentResult, PlanningMode,
};
pub use kalman::{FilterConfig, FlowFilter, KalmanState};
pub use opt::{CostSurrogate, LinkBudget, Solution, Solver, SolverStats};
pub use routing::{FlowVolumeVector, LinkLoadVector, RoutingMatrix};
pub use sampling::{FlowObservation, SamplingPlan};
