//! Sampling-rate allocation under per-link budgets.
//!
//! The objective is the total conditional variance of the combined
//! per-flow estimators at the planning estimate `x_hat`:
//! `sum_j x_hat(j) / sum_{l in path(j)} u(l,j) / (1 - u(l,j))`, with a finite
//! surrogate `x_hat(j) * M` for flows no link samples. Feasible plans satisfy
//! `sum_{j on l} u(l,j) <= d(l)` and `0 <= u <= u_max`.
//!
//! Three solvers are provided:
//!
//! * [`solve_exact`] enumerates every product vertex of the budget polytope.
//! * [`solve_heuristic`] runs link-wise best response over product vertices.
//! * [`solve_continuous`] runs link-wise best response over the whole
//!   feasible set, solving each link's separable subproblem exactly
//!   (water-filling) or on a fine grid when some term is concave.
//!
//! The objective is not concave in general: a flow's term on link `l` is
//! `x (1 - u) / (a + (1 - a) u)` with `a` the odds already collected on its
//! other links, which is convex in `u` whenever `a < 1`. Vertex solutions can
//! therefore be beaten by interior plans, and with `d(l) <= u_max` every
//! vertex of a link samples at most one flow. [`solve_continuous`] is the
//! solver to use for planning; the vertex solvers are kept for comparison.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::{FlowVolumeVector, RoutingMatrix};
use crate::sampling::{combined_variance_coeff, SamplingPlan};
use crate::seeds::{self, Domain};

/// Slack allowed on each link's budget by [`feasible`].
pub const BUDGET_TOL: f64 = 1e-9;

/// Default cap on the number of product vertices [`solve_exact`] visits.
pub const DEFAULT_EXACT_CAP: u64 = 1_000_000;

/// Default number of budget steps in the per-link grid search.
pub const GRID_STEPS: usize = 400;

// Relative margin for "strictly better" in the descent loops.
const IMPROVE_TOL: f64 = 1e-12;

/// Per-link sampling capacity `d(l)` and the per-rate cap `u_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    d: Vec<f64>,
    u_max: f64,
}

impl LinkBudget {
    pub fn new(d: Vec<f64>, u_max: f64) -> Result<Self> {
        if !(u_max > 0.0 && u_max <= 1.0) {
            return Err(Error::InvalidBudget(format!(
                "u_max = {u_max} outside (0, 1]"
            )));
        }
        if let Some(l) = d.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidBudget(format!(
                "d[{l}] = {} must be positive",
                d[l]
            )));
        }
        Ok(Self { d, u_max })
    }

    pub fn uniform(n_links: usize, d: f64, u_max: f64) -> Result<Self> {
        Self::new(vec![d; n_links], u_max)
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    pub fn u_max(&self) -> f64 {
        self.u_max
    }

    fn check(&self, routing: &RoutingMatrix) -> Result<()> {
        if self.d.len() != routing.n_links() {
            return Err(Error::dims("budget", routing.n_links(), self.d.len()));
        }
        Ok(())
    }
}

/// Finite stand-in for the infinite cost of an unobserved flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSurrogate {
    m_scale: f64,
}

impl Default for CostSurrogate {
    fn default() -> Self {
        Self { m_scale: 1e4 }
    }
}

impl CostSurrogate {
    pub fn new(m_scale: f64) -> Result<Self> {
        if !(m_scale >= 1.0 && m_scale.is_finite()) {
            return Err(Error::InvalidBudget(format!(
                "M_scale = {m_scale} must be >= 1"
            )));
        }
        Ok(Self { m_scale })
    }

    pub fn m_scale(&self) -> f64 {
        self.m_scale
    }

    fn flow_cost(&self, x: f64, coeff: f64) -> f64 {
        if coeff.is_infinite() {
            x * self.m_scale
        } else {
            x * coeff
        }
    }
}

fn check_inputs(
    x_hat: &FlowVolumeVector,
    routing: &RoutingMatrix,
    budget: Option<&LinkBudget>,
) -> Result<()> {
    if x_hat.len() != routing.n_flows() {
        return Err(Error::dims("x_hat", routing.n_flows(), x_hat.len()));
    }
    if let Some(b) = budget {
        b.check(routing)?;
    }
    Ok(())
}

fn flow_cost(
    x_hat: &FlowVolumeVector,
    plan: &SamplingPlan,
    routing: &RoutingMatrix,
    s: &CostSurrogate,
    flow: usize,
) -> f64 {
    let coeff = combined_variance_coeff(
        &routing
            .links_of_flow(flow)
            .expect("flow in range")
            .iter()
            .map(|&l| plan.rate(l, flow))
            .collect::<Vec<_>>(),
    );
    s.flow_cost(x_hat[flow], coeff)
}

fn total_cost(
    x_hat: &FlowVolumeVector,
    plan: &SamplingPlan,
    routing: &RoutingMatrix,
    s: &CostSurrogate,
) -> f64 {
    (0..routing.n_flows())
        .map(|j| flow_cost(x_hat, plan, routing, s, j))
        .sum()
}

// Cost of the flows crossing `link`; the only terms a change on `link` moves.
fn link_cost(
    x_hat: &FlowVolumeVector,
    plan: &SamplingPlan,
    routing: &RoutingMatrix,
    s: &CostSurrogate,
    link: usize,
) -> f64 {
    routing
        .flows_on_link(link)
        .expect("link in range")
        .iter()
        .map(|&j| flow_cost(x_hat, plan, routing, s, j))
        .sum()
}

/// Total estimation variance of `plan` at volumes `x_hat`.
pub fn instantaneous_cost(
    x_hat: &FlowVolumeVector,
    plan: &SamplingPlan,
    routing: &RoutingMatrix,
    s: &CostSurrogate,
) -> Result<f64> {
    check_inputs(x_hat, routing, None)?;
    plan.check_dims(routing)?;
    Ok(total_cost(x_hat, plan, routing, s))
}

/// Even split of each link's budget over the flows crossing it.
pub fn naive_allocation(routing: &RoutingMatrix, budget: &LinkBudget) -> Result<SamplingPlan> {
    budget.check(routing)?;
    let mut plan = SamplingPlan::zeros(routing);
    for l in 0..routing.n_links() {
        let flows = routing.flows_on_link(l)?;
        if flows.is_empty() {
            continue;
        }
        let share = (budget.d[l] / flows.len() as f64).min(budget.u_max);
        for &j in flows {
            plan.set_unchecked(l, j, share);
        }
    }
    Ok(plan)
}

/// Budget and range check with [`BUDGET_TOL`] slack on each link sum.
pub fn feasible(plan: &SamplingPlan, routing: &RoutingMatrix, budget: &LinkBudget) -> bool {
    if plan.check_dims(routing).is_err() || budget.check(routing).is_err() {
        return false;
    }
    for l in 0..routing.n_links() {
        let mut sum = 0.0;
        for j in 0..routing.n_flows() {
            let u = plan.rate(l, j);
            if !(0.0..=budget.u_max).contains(&u) || (u > 0.0 && !routing.get(l, j)) {
                return false;
            }
            sum += u;
        }
        if sum > budget.d[l] + BUDGET_TOL {
            return false;
        }
    }
    true
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= n {
        rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    }
    out
}

/// Vertices of `{v in [0, u_max]^n : sum v <= d(link)}` for the `n` flows on
/// `link`, coordinates in `flows_on_link` order.
///
/// These are the 0/`u_max` assignments within budget plus, when the budget
/// is not a multiple of `u_max`, the assignments with `k = floor(d / u_max)`
/// coordinates at `u_max` and one more at the residual `d - k u_max`.
pub fn link_vertices(
    link: usize,
    routing: &RoutingMatrix,
    budget: &LinkBudget,
) -> Result<Vec<Vec<f64>>> {
    budget.check(routing)?;
    let n = routing.flows_on_link(link)?.len();
    if n == 0 {
        return Err(Error::InvalidBudget(format!(
            "link {link} carries no flows"
        )));
    }
    Ok(box_simplex_vertices(n, budget.d[link], budget.u_max))
}

fn box_simplex_vertices(n: usize, d: f64, u_max: f64) -> Vec<Vec<f64>> {
    let eps = 1e-12;
    let k_full = (((d + eps) / u_max).floor() as usize).min(n);
    let mut out = Vec::new();
    for k in 0..=k_full {
        for idx in combinations(n, k) {
            let mut v = vec![0.0; n];
            for i in idx {
                v[i] = u_max;
            }
            out.push(v);
        }
    }
    let residual = d - k_full as f64 * u_max;
    if k_full < n && residual > eps && residual < u_max - eps {
        for idx in combinations(n, k_full) {
            for r in (0..n).filter(|i| !idx.contains(i)) {
                let mut v = vec![0.0; n];
                for &i in &idx {
                    v[i] = u_max;
                }
                v[r] = residual;
                out.push(v);
            }
        }
    }
    out
}

/// True when every link's rate sub-vector is one of its [`link_vertices`].
pub fn is_product_vertex(
    plan: &SamplingPlan,
    routing: &RoutingMatrix,
    budget: &LinkBudget,
) -> bool {
    (0..routing.n_links()).all(|l| {
        let Ok(rates) = plan.link_rates(routing, l) else {
            return false;
        };
        if rates.is_empty() {
            return true;
        }
        link_vertices(l, routing, budget)
            .map(|vs| {
                vs.iter()
                    .any(|v| v.iter().zip(&rates).all(|(a, b)| (a - b).abs() <= 1e-12))
            })
            .unwrap_or(false)
    })
}

/// Deterministic counters reported by the solvers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverStats {
    pub sweeps: usize,
    pub cost_evaluations: u64,
    pub restarts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub plan: SamplingPlan,
    pub cost: f64,
    pub stats: SolverStats,
}

// a is better than b: lower cost, ties (relative 1e-12) to the lex-smaller plan
fn better(a_cost: f64, a: &SamplingPlan, b_cost: f64, b: &SamplingPlan) -> bool {
    let scale = a_cost.abs().max(b_cost.abs()).max(f64::MIN_POSITIVE);
    if (a_cost - b_cost).abs() <= IMPROVE_TOL * scale {
        a.lex_cmp(b) == Ordering::Less
    } else {
        a_cost < b_cost
    }
}

fn set_link(plan: &mut SamplingPlan, routing: &RoutingMatrix, link: usize, rates: &[f64]) {
    for (&j, &u) in routing
        .flows_on_link(link)
        .expect("link in range")
        .iter()
        .zip(rates)
    {
        plan.set_unchecked(link, j, u);
    }
}

fn active_links(routing: &RoutingMatrix) -> Vec<usize> {
    (0..routing.n_links())
        .filter(|&l| !routing.flows_on_link(l).expect("in range").is_empty())
        .collect()
}

/// Minimum-cost product vertex by exhaustive enumeration.
///
/// Fails with [`Error::SolverSize`] when the product of the per-link vertex
/// counts exceeds `cap`.
pub fn solve_exact(
    x_hat: &FlowVolumeVector,
    routing: &RoutingMatrix,
    budget: &LinkBudget,
    s: &CostSurrogate,
    cap: u64,
) -> Result<Solution> {
    check_inputs(x_hat, routing, Some(budget))?;
    let links = active_links(routing);
    let vertex_sets = links
        .iter()
        .map(|&l| link_vertices(l, routing, budget))
        .collect::<Result<Vec<_>>>()?;
    let candidates: f64 = vertex_sets.iter().map(|v| v.len() as f64).product();
    if candidates > cap as f64 {
        return Err(Error::SolverSize { candidates, cap });
    }

    let mut idx = vec![0usize; links.len()];
    let mut plan = SamplingPlan::zeros(routing);
    for (k, &l) in links.iter().enumerate() {
        set_link(&mut plan, routing, l, &vertex_sets[k][0]);
    }
    let mut best_cost = total_cost(x_hat, &plan, routing, s);
    let mut best = plan.clone();
    let mut evaluations = 1u64;

    // odometer over the product of vertex sets
    'outer: loop {
        let mut k = 0;
        loop {
            if k == links.len() {
                break 'outer;
            }
            idx[k] += 1;
            if idx[k] < vertex_sets[k].len() {
                set_link(&mut plan, routing, links[k], &vertex_sets[k][idx[k]]);
                break;
            }
            idx[k] = 0;
            set_link(&mut plan, routing, links[k], &vertex_sets[k][0]);
            k += 1;
        }
        let cost = total_cost(x_hat, &plan, routing, s);
        evaluations += 1;
        if better(cost, &plan, best_cost, &best) {
            best_cost = cost;
            best.clone_from(&plan);
        }
    }

    Ok(Solution {
        plan: best,
        cost: best_cost,
        stats: SolverStats {
            sweeps: 0,
            cost_evaluations: evaluations,
            restarts: 0,
        },
    })
}

/// Link-wise best response over product vertices from `restarts` random
/// starting vertices; returns the best local optimum found.
pub fn solve_heuristic(
    x_hat: &FlowVolumeVector,
    routing: &RoutingMatrix,
    budget: &LinkBudget,
    s: &CostSurrogate,
    restarts: usize,
    seed: u64,
) -> Result<Solution> {
    check_inputs(x_hat, routing, Some(budget))?;
    let links = active_links(routing);
    let vertex_sets = links
        .iter()
        .map(|&l| link_vertices(l, routing, budget))
        .collect::<Result<Vec<_>>>()?;

    let mut stats = SolverStats {
        restarts: restarts.max(1),
        ..SolverStats::default()
    };
    let mut best: Option<(f64, SamplingPlan)> = None;

    for r in 0..restarts.max(1) {
        let mut rng = seeds::stream(seed, Domain::Solver, r as u64);
        let mut plan = SamplingPlan::zeros(routing);
        for (k, &l) in links.iter().enumerate() {
            let pick = rng.random_range(0..vertex_sets[k].len());
            set_link(&mut plan, routing, l, &vertex_sets[k][pick]);
        }
        loop {
            stats.sweeps += 1;
            let mut improved = false;
            for (k, &l) in links.iter().enumerate() {
                let current_rates = plan.link_rates(routing, l)?;
                let current = link_cost(x_hat, &plan, routing, s, l);
                let mut best_local = (current, None);
                for (vi, v) in vertex_sets[k].iter().enumerate() {
                    set_link(&mut plan, routing, l, v);
                    let c = link_cost(x_hat, &plan, routing, s, l);
                    stats.cost_evaluations += 1;
                    if c < best_local.0 * (1.0 - IMPROVE_TOL) {
                        best_local = (c, Some(vi));
                    }
                }
                match best_local.1 {
                    Some(vi) => {
                        set_link(&mut plan, routing, l, &vertex_sets[k][vi]);
                        improved = true;
                    }
                    None => set_link(&mut plan, routing, l, &current_rates),
                }
            }
            if !improved {
                break;
            }
        }
        let cost = total_cost(x_hat, &plan, routing, s);
        if best
            .as_ref()
            .is_none_or(|(bc, bp)| better(cost, &plan, *bc, bp))
        {
            best = Some((cost, plan));
        }
    }

    let (cost, plan) = best.expect("at least one restart");
    Ok(Solution { plan, cost, stats })
}

/// Link-wise block-coordinate descent over the full feasible set, starting
/// from [`naive_allocation`]. Each step replaces one link's rates with the
/// best response given the other links and keeps it only if the total cost
/// strictly drops, so the result never costs more than the naive plan.
pub fn solve_continuous(
    x_hat: &FlowVolumeVector,
    routing: &RoutingMatrix,
    budget: &LinkBudget,
    s: &CostSurrogate,
    max_sweeps: usize,
) -> Result<Solution> {
    check_inputs(x_hat, routing, Some(budget))?;
    let links = active_links(routing);
    let mut plan = naive_allocation(routing, budget)?;
    let mut stats = SolverStats::default();

    while stats.sweeps < max_sweeps.max(1) {
        stats.sweeps += 1;
        let mut improved = false;
        for &l in &links {
            let current_rates = plan.link_rates(routing, l)?;
            let current = link_cost(x_hat, &plan, routing, s, l);
            let proposal = link_best_response(x_hat, &plan, routing, budget, s, l);
            set_link(&mut plan, routing, l, &proposal);
            let c = link_cost(x_hat, &plan, routing, s, l);
            stats.cost_evaluations += 1;
            if c < current * (1.0 - IMPROVE_TOL) {
                improved = true;
            } else {
                set_link(&mut plan, routing, l, &current_rates);
            }
        }
        if !improved {
            break;
        }
    }

    let cost = total_cost(x_hat, &plan, routing, s);
    Ok(Solution { plan, cost, stats })
}

// Odds u / (1 - u); infinite at u = 1.
fn odds(u: f64) -> f64 {
    if u >= 1.0 {
        f64::INFINITY
    } else {
        u / (1.0 - u)
    }
}

struct Term {
    x: f64,
    // odds collected on the flow's other links
    a: f64,
}

impl Term {
    fn cost(&self, u: f64, s: &CostSurrogate) -> f64 {
        let total = self.a + odds(u);
        if total.is_infinite() {
            0.0
        } else if total > 0.0 {
            self.x / total
        } else {
            self.x * s.m_scale
        }
    }
}

/// Best rates for the flows on `link`, other links held fixed.
fn link_best_response(
    x_hat: &FlowVolumeVector,
    plan: &SamplingPlan,
    routing: &RoutingMatrix,
    budget: &LinkBudget,
    s: &CostSurrogate,
    link: usize,
) -> Vec<f64> {
    let flows = routing.flows_on_link(link).expect("link in range");
    let terms: Vec<Term> = flows
        .iter()
        .map(|&j| Term {
            x: x_hat[j],
            a: routing
                .links_of_flow(j)
                .expect("flow in range")
                .iter()
                .filter(|&&k| k != link)
                .map(|&k| odds(plan.rate(k, j)))
                .sum(),
        })
        .collect();
    let d = budget.d[link];
    let u_max = budget.u_max;

    // Flows with zero volume or an exact observation elsewhere gain nothing.
    let active: Vec<usize> = (0..terms.len())
        .filter(|&i| terms[i].x > 0.0 && terms[i].a.is_finite())
        .collect();
    let mut rates = vec![0.0; terms.len()];
    if active.is_empty() {
        return rates;
    }
    if active.len() as f64 * u_max <= d {
        for &i in &active {
            rates[i] = u_max;
        }
        return rates;
    }
    if active.iter().all(|&i| terms[i].a < 1.0) {
        waterfill(&terms, &active, d, u_max, &mut rates);
    } else {
        grid_allocate(&terms, &active, d, u_max, s, &mut rates);
    }
    rates
}

// Separable convex case: the KKT point u_i(lambda) where -x / D^2 + lambda = 0,
// D = a + (1 - a) u, clipped to [0, u_max], with lambda set so the budget binds.
fn waterfill(terms: &[Term], active: &[usize], d: f64, u_max: f64, rates: &mut [f64]) {
    let at = |lambda: f64, i: usize| -> f64 {
        let t = &terms[i];
        ((t.x / lambda).sqrt() - t.a) / (1.0 - t.a)
    };
    let total = |lambda: f64| -> f64 {
        active
            .iter()
            .map(|&i| at(lambda, i).clamp(0.0, u_max))
            .sum()
    };
    let (mut lo, mut hi) = (1.0, 1.0);
    while total(hi) > d {
        hi *= 2.0;
    }
    while total(lo) < d && lo > 1e-300 {
        lo *= 0.5;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if total(mid) > d {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-15 {
            break;
        }
    }
    for &i in active {
        rates[i] = at(hi, i).clamp(0.0, u_max);
    }
}

// General case: min-plus knapsack over a uniform grid of the link budget.
fn grid_allocate(
    terms: &[Term],
    active: &[usize],
    d: f64,
    u_max: f64,
    s: &CostSurrogate,
    rates: &mut [f64],
) {
    let steps = GRID_STEPS;
    let unit = d / steps as f64;
    let max_units = ((u_max / unit).floor() as usize).min(steps);
    // best[b]: min cost of flows so far using at most b units
    let mut best = vec![0.0; steps + 1];
    let mut choice = vec![vec![0usize; steps + 1]; active.len()];
    for (n, &i) in active.iter().enumerate() {
        let costs: Vec<f64> = (0..=max_units)
            .map(|k| terms[i].cost((k as f64 * unit).min(u_max), s))
            .collect();
        let mut next = vec![f64::INFINITY; steps + 1];
        for b in 0..=steps {
            for k in 0..=max_units.min(b) {
                let c = best[b - k] + costs[k];
                if c < next[b] {
                    next[b] = c;
                    choice[n][b] = k;
                }
            }
        }
        best = next;
    }
    let mut b = steps;
    for (n, &i) in active.iter().enumerate().rev() {
        let k = choice[n][b];
        rates[i] = (k as f64 * unit).min(u_max);
        b -= k;
    }
}

/// Solver selection for planning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Solver {
    Exact {
        #[serde(default = "default_cap")]
        cap: u64,
    },
    Heuristic {
        #[serde(default = "default_restarts")]
        restarts: usize,
    },
    Continuous {
        #[serde(default = "default_max_sweeps")]
        max_sweeps: usize,
    },
}

fn default_cap() -> u64 {
    DEFAULT_EXACT_CAP
}

fn default_restarts() -> usize {
    8
}

fn default_max_sweeps() -> usize {
    200
}

impl Default for Solver {
    fn default() -> Self {
        Solver::Continuous {
            max_sweeps: default_max_sweeps(),
        }
    }
}

impl Solver {
    pub fn solve(
        &self,
        x_hat: &FlowVolumeVector,
        routing: &RoutingMatrix,
        budget: &LinkBudget,
        s: &CostSurrogate,
        seed: u64,
    ) -> Result<Solution> {
        match *self {
            Solver::Exact { cap } => solve_exact(x_hat, routing, budget, s, cap),
            Solver::Heuristic { restarts } => {
                solve_heuristic(x_hat, routing, budget, s, restarts, seed)
            }
            Solver::Continuous { max_sweeps } => {
                solve_continuous(x_hat, routing, budget, s, max_sweeps)
            }
        }
    }
}
