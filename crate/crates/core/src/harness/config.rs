//! Experiment configuration, loadable from JSON or TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman::FilterConfig;
use crate::opt::Solver;

use super::synthetic::{SyntheticTraceSpec, TopologySpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologySource {
    Synthetic(TopologySpec),
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    Synthetic(SyntheticTraceSpec),
    Csv(PathBuf),
}

/// Either one budget for every link or one per link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BudgetSpec {
    Uniform(f64),
    PerLink(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanningMode {
    /// Solve once at the end of calibration.
    Static,
    /// Re-solve every `resolve_every` slots from the current filtered state.
    Adaptive { resolve_every: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub topology_source: TopologySource,
    pub trace_source: TraceSource,
    /// Training length in slots.
    #[serde(default = "default_t0")]
    pub t0: usize,
    /// Total slots, training included.
    #[serde(rename = "T", default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_budget")]
    pub budget: BudgetSpec,
    #[serde(default = "default_u_max")]
    pub u_max: f64,
    #[serde(default = "default_planning")]
    pub planning_mode: PlanningMode,
    #[serde(default)]
    pub solver: Solver,
    #[serde(rename = "M_scale", alias = "m_scale", default = "default_m_scale")]
    pub m_scale: f64,
    #[serde(default)]
    pub seed: u64,
    /// Refit the flow model every this many evaluation slots.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recalibrate_every: Option<usize>,
    #[serde(default = "default_var_floor")]
    pub var_floor: f64,
    #[serde(default)]
    pub filter: FilterConfig,
}

fn default_t0() -> usize {
    500
}
fn default_horizon() -> usize {
    644
}
fn default_budget() -> BudgetSpec {
    BudgetSpec::Uniform(0.2)
}
fn default_u_max() -> f64 {
    1.0
}
fn default_planning() -> PlanningMode {
    PlanningMode::Static
}
fn default_m_scale() -> f64 {
    1e4
}
fn default_var_floor() -> f64 {
    crate::dynamics::DEFAULT_VAR_FLOOR
}

impl ExperimentConfig {
    /// Synthetic backbone run: 9 nodes, 26 links, 72 flows, budget 0.2,
    /// 500 training slots plus one day of 144 ten-minute slots.
    pub fn backbone(seed: u64) -> Self {
        Self {
            topology_source: TopologySource::Synthetic(TopologySpec::backbone()),
            trace_source: TraceSource::Synthetic(SyntheticTraceSpec::default()),
            t0: default_t0(),
            horizon: default_horizon(),
            budget: default_budget(),
            u_max: default_u_max(),
            planning_mode: default_planning(),
            solver: Solver::default(),
            m_scale: default_m_scale(),
            seed,
            recalibrate_every: None,
            var_floor: default_var_floor(),
            filter: FilterConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t0 < 10 {
            return Err(Error::Config(format!(
                "t0 = {} must be at least 10",
                self.t0
            )));
        }
        if self.t0 >= self.horizon {
            return Err(Error::Config(format!(
                "t0 = {} must be below T = {}",
                self.t0, self.horizon
            )));
        }
        match &self.budget {
            BudgetSpec::Uniform(d) if !(*d > 0.0) => {
                return Err(Error::Config(format!("budget {d} must be positive")))
            }
            BudgetSpec::PerLink(ds) if ds.iter().any(|d| !(*d > 0.0)) => {
                return Err(Error::Config("every link budget must be positive".into()))
            }
            _ => {}
        }
        if !(self.u_max > 0.0 && self.u_max <= 1.0) {
            return Err(Error::Config(format!(
                "u_max = {} outside (0, 1]",
                self.u_max
            )));
        }
        if !(self.m_scale >= 1.0) {
            return Err(Error::Config(format!(
                "M_scale = {} must be >= 1",
                self.m_scale
            )));
        }
        if let PlanningMode::Adaptive { resolve_every: 0 } = self.planning_mode {
            return Err(Error::Config("resolve_every must be positive".into()));
        }
        if self.recalibrate_every == Some(0) {
            return Err(Error::Config("recalibrate_every must be positive".into()));
        }
        if let TraceSource::Synthetic(spec) = &self.trace_source {
            spec.validate()?;
        }
        Ok(())
    }

    /// Parses JSON or TOML by file extension. Relative CSV paths are taken
    /// relative to the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        };
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let TopologySource::Csv(p) = &mut self.topology_source {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let TraceSource::Csv(p) = &mut self.trace_source {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
