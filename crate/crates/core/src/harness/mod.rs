//! End-to-end experiments: calibrate on a fully observed training window,
//! plan sampling rates, then sample, combine and filter slot by slot.
//!
//! [`compare`] runs the optimized plan and the naive even split on the same
//! trace with independent sampling streams and reports both RMSE series.

mod config;
mod output;
pub mod synthetic;

use serde::{Deserialize, Serialize};

pub use config::{BudgetSpec, ExperimentConfig, PlanningMode, TopologySource, TraceSource};
pub use output::{write_outputs, Summary};

use crate::dynamics::{calibrate, Calibration, TraceMatrix};
use crate::error::{Error, Result};
use crate::kalman::FlowFilter;
use crate::opt::{instantaneous_cost, naive_allocation, CostSurrogate, LinkBudget, SolverStats};
use crate::routing::{FlowVolumeVector, RoutingMatrix};
use crate::sampling::{observe_flows, SamplingPlan};
use crate::seeds::{self, Domain};

/// `sqrt(sum_j (est_j - truth_j)^2 / J)`.
pub fn rmse(estimates: &[f64], truth: &[f64]) -> Result<f64> {
    if estimates.len() != truth.len() {
        return Err(Error::dims("rmse", truth.len(), estimates.len()));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let sse: f64 = estimates
        .iter()
        .zip(truth)
        .map(|(e, t)| (e - t).powi(2))
        .sum();
    Ok((sse / truth.len() as f64).sqrt())
}

/// Plan in force from slot `start` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEpoch {
    pub start: usize,
    pub plan: SamplingPlan,
    pub cost: f64,
    pub stats: SolverStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub observations: Vec<Option<f64>>,
    pub estimates: Vec<f64>,
    pub squared_errors: Vec<f64>,
}

/// One plan's pass over the evaluation slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRun {
    pub epochs: Vec<PlanEpoch>,
    pub steps: Vec<StepRecord>,
    pub rmse_series: Vec<f64>,
    pub rmse_time_average: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub optimal_average: f64,
    pub naive_average: f64,
    /// `100 (naive - optimal) / naive`.
    pub percent_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub n_links: usize,
    pub n_flows: usize,
    /// True volumes for slots `t0..T`.
    pub truth: Vec<Vec<f64>>,
    pub optimal: PlanRun,
    pub naive: Option<PlanRun>,
    pub comparison: Option<Comparison>,
    pub warnings: Vec<String>,
}

/// Everything fixed before the evaluation loop starts.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub routing: RoutingMatrix,
    pub trace: TraceMatrix,
    pub calibration: Calibration,
    pub budget: LinkBudget,
    pub surrogate: CostSurrogate,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let routing = match &cfg.topology_source {
        TopologySource::Synthetic(spec) => synthetic::generate_topology(spec, cfg.seed)?.routing,
        TopologySource::Csv(path) => RoutingMatrix::load_csv(path)?,
    };
    let trace = match &cfg.trace_source {
        TraceSource::Synthetic(spec) => spec.generate(routing.n_flows(), cfg.horizon, cfg.seed)?.1,
        TraceSource::Csv(path) => {
            let full = TraceMatrix::load_csv(path)?;
            if full.n_steps() < cfg.horizon {
                return Err(Error::Config(format!(
                    "{} has {} slots, T = {}",
                    path.display(),
                    full.n_steps(),
                    cfg.horizon
                )));
            }
            full.window(0, cfg.horizon)?
        }
    };
    if trace.n_flows() != routing.n_flows() {
        return Err(Error::Config(format!(
            "trace has {} flows, routing matrix has {}",
            trace.n_flows(),
            routing.n_flows()
        )));
    }
    let d = match &cfg.budget {
        BudgetSpec::Uniform(d) => vec![*d; routing.n_links()],
        BudgetSpec::PerLink(ds) => {
            if ds.len() != routing.n_links() {
                return Err(Error::Config(format!(
                    "{} link budgets for {} links",
                    ds.len(),
                    routing.n_links()
                )));
            }
            ds.clone()
        }
    };
    let budget = LinkBudget::new(d, cfg.u_max)?;
    let surrogate = CostSurrogate::new(cfg.m_scale)?;
    let calibration = calibrate(&trace.window(0, cfg.t0)?, cfg.var_floor)?;
    Ok(Prepared {
        routing,
        trace,
        calibration,
        budget,
        surrogate,
    })
}

fn calibration_warnings(cal: &Calibration, at: usize) -> Vec<String> {
    cal.constant_flows
        .iter()
        .map(|j| format!("slot {at}: flow {j} constant over calibration window; rho = 0 and variance floor used"))
        .collect()
}

enum Planner<'a> {
    Optimized(&'a ExperimentConfig),
    Naive,
}

fn run_plan(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    planner: Planner<'_>,
    stream: Domain,
    warnings: &mut Vec<String>,
) -> Result<PlanRun> {
    let routing = &prep.routing;
    let model = prep.calibration.model.clone();
    let mut filter = FlowFilter::new(model.clone(), cfg.filter).starting_at(cfg.t0);
    let mut rng = seeds::stream(cfg.seed, stream, 0);

    let solve = |x_hat: &[f64], epoch: u64| -> Result<(SamplingPlan, f64, SolverStats)> {
        let x = FlowVolumeVector::new(x_hat.iter().map(|v| v.max(0.0)).collect())?;
        match planner {
            Planner::Optimized(cfg) => {
                let sol = cfg.solver.solve(
                    &x,
                    routing,
                    &prep.budget,
                    &prep.surrogate,
                    cfg.seed.wrapping_add(epoch),
                )?;
                Ok((sol.plan, sol.cost, sol.stats))
            }
            Planner::Naive => {
                let plan = naive_allocation(routing, &prep.budget)?;
                let cost = instantaneous_cost(&x, &plan, routing, &prep.surrogate)?;
                Ok((plan, cost, SolverStats::default()))
            }
        }
    };

    let resolve_every = match (&planner, cfg.planning_mode) {
        (Planner::Optimized(_), PlanningMode::Adaptive { resolve_every }) => Some(resolve_every),
        _ => None,
    };

    // x_hat at t0 is the calibrated initial state
    let (plan, cost, stats) = solve(model.init_mean(), 0)?;
    let mut epochs = vec![PlanEpoch {
        start: cfg.t0,
        plan,
        cost,
        stats,
    }];
    let mut history: Vec<Vec<f64>> = prep.trace.rows()[..cfg.t0].to_vec();
    let mut steps = Vec::with_capacity(cfg.horizon - cfg.t0);
    let mut rmse_series = Vec::with_capacity(cfg.horizon - cfg.t0);

    for t in cfg.t0..cfg.horizon {
        let elapsed = t - cfg.t0;
        if elapsed > 0 {
            if let Some(k) = cfg.recalibrate_every {
                if elapsed.is_multiple_of(k) {
                    let window = TraceMatrix::new(history[history.len() - cfg.t0..].to_vec())?;
                    let cal = calibrate(&window, cfg.var_floor)?;
                    warnings.extend(calibration_warnings(&cal, t));
                    filter.replace_model(cal.model)?;
                }
            }
            if let Some(k) = resolve_every {
                if elapsed.is_multiple_of(k) {
                    let current = filter.state().estimates(filter.model());
                    let (plan, cost, stats) = solve(&current, (elapsed / k) as u64)?;
                    epochs.push(PlanEpoch {
                        start: t,
                        plan,
                        cost,
                        stats,
                    });
                }
            }
        }
        let plan = &epochs.last().expect("initial epoch").plan;
        let truth = prep.trace.row(t);
        let x = FlowVolumeVector::new(truth.to_vec())?;
        let observations: Vec<Option<f64>> = observe_flows(&x, plan, routing, &mut rng)?
            .into_iter()
            .map(|o| o.combined)
            .collect();
        let estimates = filter.step(plan, routing, &observations)?;
        let squared_errors: Vec<f64> = estimates
            .iter()
            .zip(truth)
            .map(|(e, x)| (e - x).powi(2))
            .collect();
        rmse_series.push(rmse(&estimates, truth)?);
        history.push(estimates.clone());
        steps.push(StepRecord {
            t,
            observations,
            estimates,
            squared_errors,
        });
    }

    let rmse_time_average = rmse_series.iter().sum::<f64>() / rmse_series.len() as f64;
    Ok(PlanRun {
        epochs,
        steps,
        rmse_series,
        rmse_time_average,
    })
}

fn base_result(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    optimal: PlanRun,
    warnings: Vec<String>,
) -> ExperimentResult {
    ExperimentResult {
        config: cfg.clone(),
        n_links: prep.routing.n_links(),
        n_flows: prep.routing.n_flows(),
        truth: prep.trace.rows()[cfg.t0..cfg.horizon].to_vec(),
        optimal,
        naive: None,
        comparison: None,
        warnings,
    }
}

/// Runs the optimized plan only.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let prep = prepare(cfg)?;
    run_prepared(cfg, &prep)
}

pub fn run_prepared(cfg: &ExperimentConfig, prep: &Prepared) -> Result<ExperimentResult> {
    let mut warnings = calibration_warnings(&prep.calibration, cfg.t0);
    let optimal = run_plan(
        cfg,
        prep,
        Planner::Optimized(cfg),
        Domain::SamplingOptimal,
        &mut warnings,
    )?;
    Ok(base_result(cfg, prep, optimal, warnings))
}

/// Runs the optimized and the naive plan on the same trace.
pub fn compare(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let prep = prepare(cfg)?;
    compare_prepared(cfg, &prep)
}

pub fn compare_prepared(cfg: &ExperimentConfig, prep: &Prepared) -> Result<ExperimentResult> {
    let mut result = run_prepared(cfg, prep)?;
    let mut naive_warnings = Vec::new();
    let naive = run_plan(
        cfg,
        prep,
        Planner::Naive,
        Domain::SamplingNaive,
        &mut naive_warnings,
    )?;
    let opt_avg = result.optimal.rmse_time_average;
    let naive_avg = naive.rmse_time_average;
    result.comparison = Some(Comparison {
        optimal_average: opt_avg,
        naive_average: naive_avg,
        percent_reduction: if naive_avg > 0.0 {
            100.0 * (naive_avg - opt_avg) / naive_avg
        } else {
            0.0
        },
    });
    result.naive = Some(naive);
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synthetic::{SyntheticTraceSpec, TopologySpec};
    use crate::opt::Solver;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[13.0], &[10.0]).unwrap(), 3.0);
        assert_eq!(
            rmse(&[1.0, 2.0, 3.0, 4.0], &[0.0, 1.0, 2.0, 3.0]).unwrap(),
            1.0
        );
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn small_config(seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            topology_source: TopologySource::Synthetic(TopologySpec {
                nodes: 4,
                links: 8,
                flows: 12,
            }),
            trace_source: TraceSource::Synthetic(SyntheticTraceSpec::default()),
            t0: 60,
            horizon: 100,
            ..ExperimentConfig::backbone(seed)
        }
    }

    #[test]
    fn lossless_monitoring_has_zero_error() {
        let mut cfg = small_config(3);
        cfg.budget = BudgetSpec::Uniform(100.0);
        let res = run_experiment(&cfg).unwrap();
        let mean_volume: f64 = res.truth.iter().flatten().sum::<f64>() / (40.0 * 12.0);
        for r in &res.optimal.rmse_series {
            assert!(*r <= 1e-6 * mean_volume, "rmse {r}");
        }
    }

    #[test]
    fn accounting_lengths() {
        let cfg = small_config(4);
        let res = compare(&cfg).unwrap();
        assert_eq!(res.optimal.rmse_series.len(), 40);
        assert_eq!(res.truth.len(), 40);
        for run in [&res.optimal, res.naive.as_ref().unwrap()] {
            assert!(run.steps.iter().all(|s| s.estimates.len() == 12));
            assert!(run.rmse_series.iter().all(|r| *r >= 0.0));
        }
        let c = res.comparison.unwrap();
        let expect = 100.0 * (c.naive_average - c.optimal_average) / c.naive_average;
        assert_eq!(c.percent_reduction, expect);
    }

    #[test]
    fn same_seed_same_result() {
        let cfg = small_config(5);
        assert_eq!(compare(&cfg).unwrap(), compare(&cfg).unwrap());
    }

    #[test]
    fn static_equals_adaptive_with_full_period() {
        for solver in [Solver::default(), Solver::Heuristic { restarts: 2 }] {
            let mut cfg = small_config(6);
            cfg.solver = solver;
            let stat = run_experiment(&cfg).unwrap();
            cfg.planning_mode = PlanningMode::Adaptive {
                resolve_every: cfg.horizon,
            };
            let adapt = run_experiment(&cfg).unwrap();
            assert_eq!(stat.optimal, adapt.optimal);
        }
    }

    #[test]
    fn adaptive_records_epochs() {
        let mut cfg = small_config(7);
        cfg.planning_mode = PlanningMode::Adaptive { resolve_every: 10 };
        let res = run_experiment(&cfg).unwrap();
        let starts: Vec<usize> = res.optimal.epochs.iter().map(|e| e.start).collect();
        assert_eq!(starts, vec![60, 70, 80, 90]);
    }

    #[test]
    fn recalibration_runs() {
        let mut cfg = small_config(8);
        cfg.recalibrate_every = Some(15);
        let res = run_experiment(&cfg).unwrap();
        assert_eq!(res.optimal.rmse_series.len(), 40);
    }

    #[test]
    fn single_link_single_flow_has_no_gain() {
        let dir = tempfile::tempdir().unwrap();
        let routing = dir.path().join("r.csv");
        RoutingMatrix::identity(1)
            .unwrap()
            .save_csv(&routing)
            .unwrap();
        let mut cfg = small_config(9);
        cfg.topology_source = TopologySource::Csv(routing);
        let res = compare(&cfg).unwrap();
        assert_eq!(
            res.optimal.epochs[0].plan,
            res.naive.as_ref().unwrap().epochs[0].plan
        );
        // same plan, independent sampling streams: averages differ only by noise
        let c = res.comparison.unwrap();
        assert!(c.percent_reduction.abs() < 25.0);
    }

    #[test]
    fn motivating_topology_gains_over_naive() {
        let dir = tempfile::tempdir().unwrap();
        let routing = dir.path().join("r.csv");
        RoutingMatrix::from_rows(&[[1u8, 1, 0], [1, 0, 1]])
            .unwrap()
            .save_csv(&routing)
            .unwrap();
        let mut cfg = small_config(10);
        cfg.topology_source = TopologySource::Csv(routing);
        cfg.trace_source = TraceSource::Synthetic(SyntheticTraceSpec {
            mean_min: 1000.0,
            mean_max: 1000.0,
            ..SyntheticTraceSpec::default()
        });
        cfg.t0 = 500;
        cfg.horizon = 644;
        // a small gain per run; judge the median of paired runs
        let mut reductions = Vec::new();
        for seed in 0..10 {
            cfg.seed = seed;
            let res = compare(&cfg).unwrap();
            assert!(res.optimal.epochs[0].cost < res.naive.as_ref().unwrap().epochs[0].cost);
            reductions.push(res.comparison.unwrap().percent_reduction);
        }
        reductions.sort_by(f64::total_cmp);
        assert!(reductions[4] + reductions[5] > 0.0, "{reductions:?}");
    }

    #[test]
    fn exact_solver_size_error_surfaces() {
        let mut cfg = ExperimentConfig::backbone(0);
        cfg.solver = Solver::Exact { cap: 1000 };
        assert!(matches!(
            run_experiment(&cfg),
            Err(Error::SolverSize { .. })
        ));
    }

    #[test]
    fn trace_flow_count_must_match_routing() {
        let dir = tempfile::tempdir().unwrap();
        let trace = dir.path().join("t.csv");
        TraceMatrix::new(vec![vec![1.0, 2.0]; 120])
            .unwrap()
            .save_csv(&trace)
            .unwrap();
        let mut cfg = small_config(1);
        cfg.trace_source = TraceSource::Csv(trace);
        assert!(matches!(prepare(&cfg), Err(Error::Config(_))));
    }
}
