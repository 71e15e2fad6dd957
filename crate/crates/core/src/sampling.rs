//! Bernoulli packet sampling at observation points and the per-flow
//! inverse-variance (BLUE) combination of the per-link estimates.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::{FlowVolumeVector, RoutingMatrix};

/// Per-(link, flow) sampling rates, zero outside the routing support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    n_links: usize,
    n_flows: usize,
    // row-major, n_links * n_flows
    rates: Vec<f64>,
}

impl SamplingPlan {
    /// The plan that samples nothing.
    pub fn zeros(routing: &RoutingMatrix) -> Self {
        Self {
            n_links: routing.n_links(),
            n_flows: routing.n_flows(),
            rates: vec![0.0; routing.n_links() * routing.n_flows()],
        }
    }

    /// Builds a plan from per-link rows of rates, checking range and support.
    pub fn from_rows(routing: &RoutingMatrix, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() != routing.n_links() {
            return Err(Error::dims("plan rows", routing.n_links(), rows.len()));
        }
        let mut plan = Self::zeros(routing);
        for (l, row) in rows.iter().enumerate() {
            if row.len() != routing.n_flows() {
                return Err(Error::dims("plan columns", routing.n_flows(), row.len()));
            }
            for (j, &u) in row.iter().enumerate() {
                plan.set(routing, l, j, u)?;
            }
        }
        Ok(plan)
    }

    /// Sets one rate, rejecting values outside `[0, 1]` or off the path.
    pub fn set(
        &mut self,
        routing: &RoutingMatrix,
        link: usize,
        flow: usize,
        rate: f64,
    ) -> Result<()> {
        if link >= self.n_links || flow >= self.n_flows {
            return Err(Error::IndexOutOfRange {
                kind: "plan entry",
                index: link * self.n_flows + flow,
                size: self.rates.len(),
            });
        }
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::InvalidPlan(format!(
                "rate ({link}, {flow}) = {rate} outside [0, 1]"
            )));
        }
        if rate > 0.0 && !routing.get(link, flow) {
            return Err(Error::InvalidPlan(format!(
                "flow {flow} does not traverse link {link}"
            )));
        }
        self.rates[link * self.n_flows + flow] = rate;
        Ok(())
    }

    pub(crate) fn set_unchecked(&mut self, link: usize, flow: usize, rate: f64) {
        self.rates[link * self.n_flows + flow] = rate;
    }

    pub fn n_links(&self) -> usize {
        self.n_links
    }

    pub fn n_flows(&self) -> usize {
        self.n_flows
    }

    pub fn rate(&self, link: usize, flow: usize) -> f64 {
        self.rates[link * self.n_flows + flow]
    }

    /// Row-major view of all rates.
    pub fn as_slice(&self) -> &[f64] {
        &self.rates
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rates
            .chunks(self.n_flows)
            .map(<[f64]>::to_vec)
            .collect()
    }

    /// Rates of `flow` on each link of its path, in path order.
    pub fn path_rates(&self, routing: &RoutingMatrix, flow: usize) -> Result<Vec<f64>> {
        Ok(routing
            .links_of_flow(flow)?
            .iter()
            .map(|&l| self.rate(l, flow))
            .collect())
    }

    /// Rates on `link` for each flow crossing it, in `flows_on_link` order.
    pub fn link_rates(&self, routing: &RoutingMatrix, link: usize) -> Result<Vec<f64>> {
        Ok(routing
            .flows_on_link(link)?
            .iter()
            .map(|&j| self.rate(link, j))
            .collect())
    }

    /// Total comparison in row-major order, used for deterministic tie-breaks.
    pub fn lex_cmp(&self, other: &Self) -> std::cmp::Ordering {
        for (a, b) in self.rates.iter().zip(&other.rates) {
            match a.total_cmp(b) {
                std::cmp::Ordering::Equal => continue,
                ord => return ord,
            }
        }
        std::cmp::Ordering::Equal
    }

    pub(crate) fn check_dims(&self, routing: &RoutingMatrix) -> Result<()> {
        if self.n_links != routing.n_links() {
            return Err(Error::dims("plan links", routing.n_links(), self.n_links));
        }
        if self.n_flows != routing.n_flows() {
            return Err(Error::dims("plan flows", routing.n_flows(), self.n_flows));
        }
        Ok(())
    }

    /// Writes `link,flow,rate` triplets for every nonzero rate.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        w.write_record(["link", "flow", "rate"])?;
        for l in 0..self.n_links {
            for j in 0..self.n_flows {
                let u = self.rate(l, j);
                if u > 0.0 {
                    w.write_record([l.to_string(), j.to_string(), u.to_string()])?;
                }
            }
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

/// What the monitors report for one flow in one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowObservation {
    /// Sampled packet counts per sampled link.
    pub per_link_counts: BTreeMap<usize, u64>,
    /// Unbiased per-link volume estimates `count / u`.
    pub per_link_estimates: BTreeMap<usize, f64>,
    /// Combined estimate, `None` when no link on the path samples the flow.
    pub combined: Option<f64>,
    /// Conditional variance of `combined` divided by the true volume;
    /// infinite when the flow is unobserved.
    pub combined_var_coeff: f64,
}

/// One Binomial(`packets`, `rate`) draw.
pub fn bernoulli_sample<R: Rng + ?Sized>(packets: u64, rate: f64, rng: &mut R) -> u64 {
    if rate <= 0.0 || packets == 0 {
        0
    } else if rate >= 1.0 {
        packets
    } else {
        Binomial::new(packets, rate)
            .expect("rate in (0, 1)")
            .sample(rng)
    }
}

/// Horvitz-Thompson style per-link estimate `count / u`.
pub fn link_estimate(count: u64, rate: f64) -> Result<f64> {
    if !(rate > 0.0) {
        return Err(Error::NoEstimate);
    }
    Ok(count as f64 / rate)
}

/// Variance of [`link_estimate`] given the true volume: `x (1 - u) / u`.
/// Infinite at `u = 0`.
pub fn link_estimator_variance(volume: f64, rate: f64) -> f64 {
    if rate <= 0.0 {
        f64::INFINITY
    } else {
        volume * (1.0 - rate) / rate
    }
}

/// Inverse-variance weights `v_l^-1 / sum_k v_k^-1`.
pub fn blue_weights(variances: &[f64]) -> Result<Vec<f64>> {
    if variances.is_empty() {
        return Err(Error::NoObservation);
    }
    if let Some(v) = variances.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::InvalidPlan(format!(
            "BLUE weights need positive variances, got {v}"
        )));
    }
    let precision: Vec<f64> = variances.iter().map(|v| v.recip()).collect();
    let total: f64 = precision.iter().sum();
    Ok(precision.into_iter().map(|p| p / total).collect())
}

/// Weighted combination `sum_l w_l z_l`. Weights are expected to sum to 1.
pub fn combine(estimates: &[f64], weights: &[f64]) -> Result<f64> {
    if estimates.len() != weights.len() {
        return Err(Error::dims("combine", estimates.len(), weights.len()));
    }
    debug_assert!((weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    Ok(estimates.iter().zip(weights).map(|(z, w)| z * w).sum())
}

/// `1 / sum_k u_k / (1 - u_k)`: the combined estimator's variance per unit
/// of true volume. Zero if any rate is 1, infinite if every rate is 0.
pub fn combined_variance_coeff(path_rates: &[f64]) -> f64 {
    let mut odds = 0.0;
    for &u in path_rates {
        if u >= 1.0 {
            return 0.0;
        }
        if u > 0.0 {
            odds += u / (1.0 - u);
        }
    }
    if odds > 0.0 {
        odds.recip()
    } else {
        f64::INFINITY
    }
}

/// Samples every flow on every positively-rated link of its path and forms
/// the combined estimate.
///
/// BLUE weights use `w_l ~ u_l / (1 - u_l)`: the true volume multiplies
/// every per-link variance on a path and cancels from the weights. A link
/// at `u = 1` observes the flow exactly: its estimate is the true volume
/// and is used as the combined value.
pub fn observe_flows<R: Rng + ?Sized>(
    x_true: &FlowVolumeVector,
    plan: &SamplingPlan,
    routing: &RoutingMatrix,
    rng: &mut R,
) -> Result<Vec<FlowObservation>> {
    plan.check_dims(routing)?;
    if x_true.len() != routing.n_flows() {
        return Err(Error::dims(
            "observe_flows",
            routing.n_flows(),
            x_true.len(),
        ));
    }
    let mut out = Vec::with_capacity(routing.n_flows());
    for j in 0..routing.n_flows() {
        let packets = x_true[j].round() as u64;
        let mut counts = BTreeMap::new();
        let mut estimates = BTreeMap::new();
        let mut rates = Vec::new();
        for &l in routing.links_of_flow(j)? {
            let u = plan.rate(l, j);
            if u <= 0.0 {
                continue;
            }
            let count = bernoulli_sample(packets, u, rng);
            counts.insert(l, count);
            // full observation reports the volume itself, not its rounding
            let estimate = if u >= 1.0 {
                x_true[j]
            } else {
                link_estimate(count, u)?
            };
            estimates.insert(l, estimate);
            rates.push((l, u));
        }
        let coeff = combined_variance_coeff(&rates.iter().map(|r| r.1).collect::<Vec<_>>());
        let combined = if rates.is_empty() {
            None
        } else if let Some(&(l, _)) = rates.iter().find(|r| r.1 >= 1.0) {
            Some(estimates[&l])
        } else {
            let variances: Vec<f64> = rates.iter().map(|&(_, u)| (1.0 - u) / u).collect();
            let weights = blue_weights(&variances)?;
            let z: Vec<f64> = rates.iter().map(|(l, _)| estimates[l]).collect();
            Some(combine(&z, &weights)?)
        };
        out.push(FlowObservation {
            per_link_counts: counts,
            per_link_estimates: estimates,
            combined,
            combined_var_coeff: coeff,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::{self, Domain};
    use proptest::prelude::*;

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (
            m,
            xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0),
        )
    }

    #[test]
    fn bernoulli_edges() {
        let mut rng = seeds::stream(1, Domain::SamplingOptimal, 0);
        assert_eq!(bernoulli_sample(1000, 1.0, &mut rng), 1000);
        assert_eq!(bernoulli_sample(1000, 0.0, &mut rng), 0);
        for _ in 0..100 {
            assert!(bernoulli_sample(37, 0.4, &mut rng) <= 37);
        }
    }

    #[test]
    fn bernoulli_mean_within_three_sigma() {
        let mut rng = seeds::stream(2, Domain::SamplingOptimal, 0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| bernoulli_sample(1000, 0.2, &mut rng) as f64)
            .collect();
        let (m, _) = mean_var(&draws);
        // 3 * sqrt(1000 * 0.2 * 0.8) / sqrt(1e5) = 0.379...
        let band = 3.0 * (1000.0f64 * 0.2 * 0.8).sqrt() / (n as f64).sqrt();
        assert!((m - 200.0).abs() <= band, "mean {m}");
    }

    #[test]
    fn link_estimate_cases() {
        assert_eq!(link_estimate(200, 0.2).unwrap(), 1000.0);
        assert_eq!(link_estimate(0, 0.5).unwrap(), 0.0);
        assert_eq!(link_estimate(777, 1.0).unwrap(), 777.0);
        assert!(matches!(link_estimate(5, 0.0), Err(Error::NoEstimate)));
    }

    #[test]
    fn link_variance_formula() {
        assert!((link_estimator_variance(1000.0, 0.2) - 4000.0).abs() < 1e-9);
        assert_eq!(link_estimator_variance(1234.0, 1.0), 0.0);
        assert_eq!(link_estimator_variance(10.0, 0.0), f64::INFINITY);
    }

    #[test]
    fn link_variance_matches_monte_carlo() {
        let mut rng = seeds::stream(3, Domain::SamplingOptimal, 0);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| link_estimate(bernoulli_sample(1000, 0.2, &mut rng), 0.2).unwrap())
            .collect();
        let (_, v) = mean_var(&draws);
        assert!((v - 4000.0).abs() / 4000.0 < 0.05, "var {v}");
    }

    #[test]
    fn blue_weight_cases() {
        assert_eq!(blue_weights(&[4000.0, 4000.0]).unwrap(), vec![0.5, 0.5]);
        let w = blue_weights(&[1000.0, 3000.0]).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        assert_eq!(blue_weights(&[17.0]).unwrap(), vec![1.0]);
        assert!(matches!(blue_weights(&[]), Err(Error::NoObservation)));
    }

    #[test]
    fn combine_cases() {
        assert_eq!(combine(&[1000.0, 1200.0], &[0.5, 0.5]).unwrap(), 1100.0);
        assert_eq!(combine(&[42.0], &[1.0]).unwrap(), 42.0);
        let w = blue_weights(&[1.0, 1.0, 1.0]).unwrap();
        assert!((combine(&[900.0, 1100.0, 1000.0], &w).unwrap() - 1000.0).abs() < 1e-9);
        assert!(combine(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn combined_coeff_cases() {
        assert!((combined_variance_coeff(&[0.2, 0.2]) - 2.0).abs() < 1e-12);
        // consistent with harmonic combination of 4000 and 4000
        let harmonic = 1.0 / (1.0 / 4000.0 + 1.0 / 4000.0);
        assert!((1000.0 * combined_variance_coeff(&[0.2, 0.2]) - harmonic).abs() < 1e-9);
        assert_eq!(combined_variance_coeff(&[1.0, 0.3]), 0.0);
        assert_eq!(combined_variance_coeff(&[0.0, 0.0]), f64::INFINITY);
    }

    fn two_link_path() -> RoutingMatrix {
        RoutingMatrix::from_rows(&[[1u8], [1]]).unwrap()
    }

    #[test]
    fn observe_lossless_plan() {
        let r = RoutingMatrix::from_rows(&[[1u8, 0, 1], [0, 1, 1]]).unwrap();
        let plan =
            SamplingPlan::from_rows(&r, &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0]]).unwrap();
        let x = FlowVolumeVector::new(vec![10.0, 250.0, 3000.0]).unwrap();
        let mut rng = seeds::stream(4, Domain::SamplingOptimal, 0);
        let obs = observe_flows(&x, &plan, &r, &mut rng).unwrap();
        for (j, o) in obs.iter().enumerate() {
            assert_eq!(o.combined, Some(x[j]));
            assert_eq!(o.combined_var_coeff, 0.0);
        }
    }

    #[test]
    fn observe_zero_plan_is_all_missing() {
        let r = RoutingMatrix::from_rows(&[[1u8, 0, 1], [0, 1, 1]]).unwrap();
        let x = FlowVolumeVector::new(vec![10.0, 250.0, 3000.0]).unwrap();
        let mut rng = seeds::stream(5, Domain::SamplingOptimal, 0);
        let obs = observe_flows(&x, &SamplingPlan::zeros(&r), &r, &mut rng).unwrap();
        assert!(obs.iter().all(|o| o.combined.is_none()
            && o.combined_var_coeff.is_infinite()
            && o.per_link_counts.is_empty()));
    }

    #[test]
    fn observe_combined_variance_two_links() {
        let r = two_link_path();
        let plan = SamplingPlan::from_rows(&r, &[vec![0.2], vec![0.2]]).unwrap();
        let x = FlowVolumeVector::new(vec![1000.0]).unwrap();
        let mut rng = seeds::stream(6, Domain::SamplingOptimal, 0);
        let zs: Vec<f64> = (0..10_000)
            .map(|_| {
                observe_flows(&x, &plan, &r, &mut rng).unwrap()[0]
                    .combined
                    .unwrap()
            })
            .collect();
        let (_, v) = mean_var(&zs);
        assert!((v - 2000.0).abs() / 2000.0 < 0.10, "var {v}");
    }

    #[test]
    fn observation_keys_follow_positive_rates() {
        let r = RoutingMatrix::from_rows(&[[1u8, 1], [1, 0], [1, 1]]).unwrap();
        let plan =
            SamplingPlan::from_rows(&r, &[vec![0.1, 0.0], vec![0.0, 0.0], vec![0.3, 0.0]]).unwrap();
        let x = FlowVolumeVector::new(vec![500.0, 500.0]).unwrap();
        let mut rng = seeds::stream(7, Domain::SamplingOptimal, 0);
        let obs = observe_flows(&x, &plan, &r, &mut rng).unwrap();
        assert_eq!(
            obs[0].per_link_counts.keys().copied().collect::<Vec<_>>(),
            vec![0, 2]
        );
        assert!(obs[1].combined.is_none());
    }

    #[test]
    fn plan_rejects_off_path_and_out_of_range() {
        let r = RoutingMatrix::from_rows(&[[1u8, 0], [0, 1]]).unwrap();
        assert!(SamplingPlan::from_rows(&r, &[vec![0.1, 0.1], vec![0.0, 0.1]]).is_err());
        assert!(SamplingPlan::from_rows(&r, &[vec![1.1, 0.0], vec![0.0, 0.1]]).is_err());
        let plan = SamplingPlan::from_rows(&r, &[vec![0.25, 0.0], vec![0.0, 0.5]]).unwrap();
        let mut buf = Vec::new();
        plan.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "link,flow,rate\n0,0,0.25\n1,1,0.5\n"
        );
    }

    fn combined_var(weights: &[f64], variances: &[f64]) -> f64 {
        weights.iter().zip(variances).map(|(w, v)| w * w * v).sum()
    }

    proptest! {
        #[test]
        fn blue_weights_sum_to_one_and_scale_free(
            vs in prop::collection::vec(1e-3f64..1e6, 1..6),
            scale in 1e-3f64..1e3,
        ) {
            let w = blue_weights(&vs).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(w.iter().all(|&x| x > 0.0 && x <= 1.0));
            let scaled: Vec<f64> = vs.iter().map(|v| v * scale).collect();
            let w2 = blue_weights(&scaled).unwrap();
            for (a, b) in w.iter().zip(&w2) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn blue_beats_simplex_grid(vs in prop::collection::vec(1.0f64..1e4, 2..4)) {
            let best = combined_var(&blue_weights(&vs).unwrap(), &vs);
            let steps = 100;
            if vs.len() == 2 {
                for a in 0..=steps {
                    let w = [a as f64 / 100.0, 1.0 - a as f64 / 100.0];
                    prop_assert!(combined_var(&w, &vs) >= best - 1e-9);
                }
            } else {
                for a in 0..=steps {
                    for b in 0..=(steps - a) {
                        let w = [a as f64 / 100.0, b as f64 / 100.0, (steps - a - b) as f64 / 100.0];
                        prop_assert!(combined_var(&w, &vs) >= best - 1e-9);
                    }
                }
            }
        }

        #[test]
        fn coeff_is_harmonic_composition(
            rates in prop::collection::vec(0.01f64..0.99, 1..5),
            x in 1.0f64..1e5,
        ) {
            let vs: Vec<f64> = rates.iter().map(|&u| link_estimator_variance(x, u)).collect();
            let harmonic = 1.0 / vs.iter().map(|v| v.recip()).sum::<f64>();
            let got = x * combined_variance_coeff(&rates);
            prop_assert!((got - harmonic).abs() <= 1e-9 * harmonic);
        }

        #[test]
        fn coeff_monotone_in_rates(
            rates in prop::collection::vec(0.0f64..1.0, 1..5),
            idx in 0usize..5,
            bump in 0.0f64..0.5,
        ) {
            let i = idx % rates.len();
            let mut raised = rates.clone();
            raised[i] = (raised[i] + bump).min(1.0);
            prop_assert!(combined_variance_coeff(&raised) <= combined_variance_coeff(&rates));
        }

        #[test]
        fn link_estimate_unbiased(rate in 0.05f64..1.0, seed in any::<u64>()) {
            let mut rng = seeds::stream(seed, Domain::SamplingNaive, 0);
            let n = 4000;
            let x = 500u64;
            let m = (0..n).map(|_| link_estimate(bernoulli_sample(x, rate, &mut rng), rate).unwrap())
                .sum::<f64>() / n as f64;
            let sd = (link_estimator_variance(x as f64, rate) / n as f64).sqrt();
            // 4.5 sigma keeps this property from flaking across proptest cases
            prop_assert!((m - x as f64).abs() <= 4.5 * sd + 1e-9);
        }
    }
}
