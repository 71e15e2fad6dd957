//! Synthetic backbone topologies and flow populations.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate, FlowModel, TraceMatrix};
use crate::error::{Error, Result};
use crate::routing::RoutingMatrix;
use crate::seeds::{self, Domain};

/// Random connected topology with bidirectional links and shortest-path
/// routes. `links` counts directed links, so it must be even.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub nodes: usize,
    pub links: usize,
    pub flows: usize,
}

impl TopologySpec {
    /// 9 nodes, 26 directed links, all 72 ordered node pairs.
    pub fn backbone() -> Self {
        Self {
            nodes: 9,
            links: 26,
            flows: 72,
        }
    }
}

/// A generated topology: node-level edges and the routing matrix.
#[derive(Debug, Clone)]
pub struct Topology {
    /// Directed link `l` goes from `links[l].0` to `links[l].1`.
    pub links: Vec<(usize, usize)>,
    /// Source and destination node of each flow.
    pub od_pairs: Vec<(usize, usize)>,
    pub routing: RoutingMatrix,
}

pub fn generate_topology(spec: &TopologySpec, seed: u64) -> Result<Topology> {
    let n = spec.nodes;
    if n < 2 {
        return Err(Error::Config("topology needs at least 2 nodes".into()));
    }
    if !spec.links.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "links = {} must be even (each edge is a pair of directed links)",
            spec.links
        )));
    }
    let edges_wanted = spec.links / 2;
    let max_edges = n * (n - 1) / 2;
    if edges_wanted < n - 1 || edges_wanted > max_edges {
        return Err(Error::Config(format!(
            "{} directed links cannot connect {n} nodes (need {} to {})",
            spec.links,
            2 * (n - 1),
            2 * max_edges
        )));
    }
    if spec.flows == 0 || spec.flows > n * (n - 1) {
        return Err(Error::Config(format!(
            "flows = {} must be in 1..={}",
            spec.flows,
            n * (n - 1)
        )));
    }

    let mut rng = seeds::stream(seed, Domain::Topology, 0);
    let mut edges = BTreeSet::new();
    for v in 1..n {
        let u = rng.random_range(0..v);
        edges.insert((u, v));
    }
    while edges.len() < edges_wanted {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    let mut links = Vec::with_capacity(spec.links);
    for &(a, b) in &edges {
        links.push((a, b));
        links.push((b, a));
    }

    let mut pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|s| (0..n).filter(move |&d| d != s).map(move |d| (s, d)))
        .collect();
    if spec.flows < pairs.len() {
        pairs.shuffle(&mut rng);
        pairs.truncate(spec.flows);
        pairs.sort_unstable();
    }

    let mut adj = vec![Vec::new(); n];
    for (l, &(a, b)) in links.iter().enumerate() {
        adj[a].push((b, l));
    }
    for out in &mut adj {
        out.sort_unstable();
    }
    let paths = pairs
        .iter()
        .map(|&(s, d)| shortest_path(&adj, s, d))
        .collect::<Vec<_>>();
    let routing = RoutingMatrix::from_paths(links.len(), &paths)?;
    Ok(Topology {
        links,
        od_pairs: pairs,
        routing,
    })
}

// BFS over directed links; ties go to the lowest-numbered neighbour.
fn shortest_path(adj: &[Vec<(usize, usize)>], src: usize, dst: usize) -> Vec<usize> {
    let mut via = vec![None; adj.len()];
    let mut seen = vec![false; adj.len()];
    let mut queue = VecDeque::from([src]);
    seen[src] = true;
    while let Some(v) = queue.pop_front() {
        if v == dst {
            break;
        }
        for &(w, l) in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                via[w] = Some((v, l));
                queue.push_back(w);
            }
        }
    }
    let mut path = Vec::new();
    let mut cur = dst;
    while let Some((prev, l)) = via[cur] {
        path.push(l);
        cur = prev;
    }
    path.reverse();
    path
}

/// Heterogeneous stationary AR(1) flows.
///
/// Long-run means are log-uniform in `[mean_min, mean_max]`, `rho` uniform in
/// `[rho_min, rho_max]`, and each flow's stationary standard deviation is
/// `cv` times its mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTraceSpec {
    pub mean_min: f64,
    pub mean_max: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub cv: f64,
}

impl Default for SyntheticTraceSpec {
    fn default() -> Self {
        Self {
            mean_min: 1e2,
            mean_max: 1e5,
            rho_min: 0.5,
            rho_max: 0.95,
            cv: 0.1,
        }
    }
}

impl SyntheticTraceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean_min > 0.0 && self.mean_min <= self.mean_max) {
            return Err(Error::Config("need 0 < mean_min <= mean_max".into()));
        }
        if !(-1.0 < self.rho_min && self.rho_min <= self.rho_max && self.rho_max < 1.0) {
            return Err(Error::Config("need -1 < rho_min <= rho_max < 1".into()));
        }
        if !(self.cv > 0.0) {
            return Err(Error::Config("cv must be positive".into()));
        }
        Ok(())
    }

    /// Draws the per-flow ground-truth model.
    pub fn draw_model(&self, n_flows: usize, seed: u64) -> Result<FlowModel> {
        self.validate()?;
        let mut rng = seeds::stream(seed, Domain::ModelDraw, 0);
        let (lo, hi) = (self.mean_min.ln(), self.mean_max.ln());
        let mut rho = Vec::with_capacity(n_flows);
        let mut noise_var = Vec::with_capacity(n_flows);
        let mut mean = Vec::with_capacity(n_flows);
        for _ in 0..n_flows {
            let m = (lo + (hi - lo) * rng.random::<f64>()).exp();
            let r = self.rho_min + (self.rho_max - self.rho_min) * rng.random::<f64>();
            let sd = self.cv * m;
            mean.push(m);
            rho.push(r);
            noise_var.push(sd * sd * (1.0 - r * r));
        }
        FlowModel::stationary(rho, noise_var, mean)
    }

    /// Ground-truth model and an `n_steps` trace drawn from it.
    pub fn generate(
        &self,
        n_flows: usize,
        n_steps: usize,
        seed: u64,
    ) -> Result<(FlowModel, TraceMatrix)> {
        let model = self.draw_model(n_flows, seed)?;
        let trace_seed = seeds::stream(seed, Domain::Trace, 0).random::<u64>();
        let trace = simulate(&model, n_steps, trace_seed)?;
        Ok((model, trace))
    }
}
