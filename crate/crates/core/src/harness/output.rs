//! Result files: `rmse.csv`, `estimates.csv`, plan CSVs and `summary.json`.
//!
//! Floats are written with Rust's shortest round-trip formatting, so the
//! bytes depend only on the values.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Comparison, ExperimentConfig, ExperimentResult, PlanRun};
use crate::error::{Error, Result};
use crate::opt::SolverStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub start: usize,
    pub cost: f64,
    pub stats: SolverStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub n_links: usize,
    pub n_flows: usize,
    pub t0: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub rmse_time_average_opt: f64,
    pub rmse_time_average_naive: Option<f64>,
    pub percent_reduction: Option<f64>,
    pub solver: Vec<EpochSummary>,
    pub naive_cost: Option<f64>,
    pub warnings: Vec<String>,
    pub config: ExperimentConfig,
}

impl Summary {
    pub fn from_result(result: &ExperimentResult) -> Self {
        let epochs = |run: &PlanRun| {
            run.epochs
                .iter()
                .map(|e| EpochSummary {
                    start: e.start,
                    cost: e.cost,
                    stats: e.stats.clone(),
                })
                .collect()
        };
        Self {
            seed: result.config.seed,
            n_links: result.n_links,
            n_flows: result.n_flows,
            t0: result.config.t0,
            horizon: result.config.horizon,
            rmse_time_average_opt: result.optimal.rmse_time_average,
            rmse_time_average_naive: result.naive.as_ref().map(|n| n.rmse_time_average),
            percent_reduction: result.comparison.map(|c: Comparison| c.percent_reduction),
            solver: epochs(&result.optimal),
            naive_cost: result.naive.as_ref().map(|n| n.epochs[0].cost),
            warnings: result.warnings.clone(),
            config: result.config.clone(),
        }
    }
}

fn create(dir: &Path, name: &str) -> Result<(PathBuf, fs::File)> {
    let path = dir.join(name);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok((path, file))
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes all result files into `dir`, creating it if needed. Plans from
/// later adaptive epochs go to `plan_opt_t{start}.csv`.
pub fn write_outputs(result: &ExperimentResult, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let naive = result.naive.as_ref();

    let (path, mut f) = create(dir, "rmse.csv")?;
    let mut buf = String::from("t,rmse_opt,rmse_naive\n");
    for (i, step) in result.optimal.steps.iter().enumerate() {
        let n = naive.map(|n| n.rmse_series[i]);
        buf.push_str(&format!(
            "{},{},{}\n",
            step.t,
            result.optimal.rmse_series[i],
            opt_cell(n)
        ));
    }
    f.write_all(buf.as_bytes())
        .map_err(|e| Error::io(&path, e))?;

    let (path, mut f) = create(dir, "estimates.csv")?;
    let mut buf = String::from("t,flow,truth,estimate_opt,estimate_naive\n");
    for (i, step) in result.optimal.steps.iter().enumerate() {
        for (j, est) in step.estimates.iter().enumerate() {
            let n = naive.map(|n| n.steps[i].estimates[j]);
            buf.push_str(&format!(
                "{},{},{},{},{}\n",
                step.t,
                j,
                result.truth[i][j],
                est,
                opt_cell(n)
            ));
        }
    }
    f.write_all(buf.as_bytes())
        .map_err(|e| Error::io(&path, e))?;

    for (k, epoch) in result.optimal.epochs.iter().enumerate() {
        let name = if k == 0 {
            "plan_opt.csv".to_string()
        } else {
            format!("plan_opt_t{}.csv", epoch.start)
        };
        epoch.plan.save_csv(dir.join(name))?;
    }
    if let Some(n) = naive {
        n.epochs[0].plan.save_csv(dir.join("plan_naive.csv"))?;
    }

    let (path, mut f) = create(dir, "summary.json")?;
    let mut json = serde_json::to_string_pretty(&Summary::from_result(result))?;
    json.push('\n');
    f.write_all(json.as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    Ok(())
}
