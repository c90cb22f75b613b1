//! Mixture sequential probability ratio test over block summaries.
//!
//! With prior draws `θ̃_1..θ̃_M` fixed up front, the likelihood ratio after
//! `n` blocks is
//!
//! ```text
//! L_n = (1/M) Σ_m Π_k g_k((θ̂_k − θ̃_m)/σ_k) / Π_k g_k((θ̂_k − θ0)/σ_k)
//! ```
//!
//! where `g_k` is the bootstrap density of block `k`. Everything is kept in
//! log space. The always-valid p-value is `min(1, 1/max_{t≤n} L_t)`.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bootstrap::{self, BootstrapConfig, KdeDensity};
use crate::exec::Exec;
use crate::metrics::{self, Block, MetricKind};
use crate::{seed, Error, Result};

/// Smallest accepted number of prior draws.
pub const MIN_PRIOR_SAMPLES: usize = 1000;

/// Normal prior `N(mean, tau²)` on the parameter, integrated by Monte Carlo
/// with `samples` draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub mean: f64,
    pub tau: f64,
    pub samples: usize,
    pub rng_seed: u64,
}

impl Prior {
    pub fn normal(mean: f64, tau: f64, samples: usize, rng_seed: u64) -> Result<Self> {
        let p = Self { mean, tau, samples, rng_seed };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("prior tau must be positive, got {}", self.tau)));
        }
        if !self.mean.is_finite() {
            return Err(Error::InvalidConfig("prior mean must be finite".into()));
        }
        if self.samples < MIN_PRIOR_SAMPLES {
            return Err(Error::InvalidConfig(format!(
                "prior needs at least {MIN_PRIOR_SAMPLES} Monte Carlo samples, got {}",
                self.samples
            )));
        }
        Ok(())
    }

    /// The `M` prior draws, in generation order.
    pub fn draw(&self) -> Vec<f64> {
        let normal = Normal::new(self.mean, self.tau).expect("validated");
        let mut rng = seed::rng(self.rng_seed);
        (0..self.samples).map(|_| normal.sample(&mut rng)).collect()
    }

    /// Same prior with a different seed.
    pub fn reseeded(&self, rng_seed: u64) -> Self {
        Self { rng_seed, ..self.clone() }
    }
}

/// How block densities are evaluated at the `M + 1` points of an update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdeEval {
    /// Full log-sum-exp over all kernels at every point.
    Exact,
    /// Exact values and slopes on a grid with the given number of nodes per
    /// bandwidth, cubic Hermite interpolation in between.
    Tabulated { nodes_per_bandwidth: u32 },
}

impl Default for KdeEval {
    fn default() -> Self {
        KdeEval::Tabulated { nodes_per_bandwidth: 6 }
    }
}

/// What one block contributes: estimate, standard error and bootstrap density
/// of the studentized statistic.
#[derive(Debug, Clone)]
pub struct BlockSummary {
    pub block_index: usize,
    pub theta_hat: f64,
    pub sigma: f64,
    pub density: KdeDensity,
}

/// One-sample block summary. Resample streams are keyed by the block index.
pub fn summarize(block: &Block, kind: &MetricKind, cfg: &BootstrapConfig) -> Result<BlockSummary> {
    let est = metrics::estimate(block.records(), kind, cfg.stderr)?;
    if !(est.sigma > 0.0) {
        return Err(Error::DegenerateBlock(format!("block {} has zero standard error", block.index())));
    }
    let block_cfg = BootstrapConfig { rng_seed: cfg.block_seed(block.index()), ..cfg.clone() };
    let samples = bootstrap::bootstrap_studentized_samples(block.records(), kind, &block_cfg)?;
    Ok(BlockSummary {
        block_index: block.index(),
        theta_hat: est.theta_hat,
        sigma: est.sigma,
        density: bootstrap::fit_kde(&samples, cfg.bandwidth)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionTag {
    Continue,
    RejectNull,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub tag: DecisionTag,
    /// Number of updates consumed when the decision was reached: the first
    /// crossing for a rejection, all updates so far otherwise.
    pub at_block: usize,
    pub p_value: f64,
}

/// Result of one update, before a decision level is applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub block_index: usize,
    pub theta_hat: f64,
    pub sigma: f64,
    pub log_l: f64,
    pub p_value: f64,
}

impl Step {
    pub fn with_decision(self, alpha: f64) -> UpdateRecord {
        UpdateRecord {
            block_index: self.block_index,
            theta_hat: self.theta_hat,
            sigma: self.sigma,
            log_l: self.log_l,
            p_value: self.p_value,
            decision: if self.p_value <= alpha { DecisionTag::RejectNull } else { DecisionTag::Continue },
        }
    }
}

/// One JSON-lines record per update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub block_index: usize,
    pub theta_hat: f64,
    pub sigma: f64,
    #[serde(rename = "log_L")]
    pub log_l: f64,
    pub p_value: f64,
    pub decision: DecisionTag,
}

#[derive(Debug, Clone)]
pub struct MsprtState {
    theta0: f64,
    prior_samples: Vec<f64>,
    /// `Σ_k ln g_k((θ̂_k − θ̃_m)/σ_k)` per prior draw.
    log_num: Vec<f64>,
    log_den: f64,
    log_l: f64,
    max_log_l: f64,
    /// `max_log_l` after each update.
    max_history: Vec<f64>,
    blocks_seen: usize,
    skipped_blocks: usize,
    last_index: Option<usize>,
    eval: KdeEval,
    exec: Exec,
}

/// Fresh state with `M` prior draws frozen for the life of the test.
pub fn init_state(theta0: f64, prior: &Prior) -> Result<MsprtState> {
    prior.validate()?;
    MsprtState::with_mixture(theta0, prior.draw())
}

/// `ln Σ exp(x)` split as `(max, ln Σ exp(x − max))`.
fn log_sum_exp(xs: &[f64]) -> (f64, f64) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (max, xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln())
}

impl MsprtState {
    /// State over an explicit set of mixture points.
    pub fn with_mixture(theta0: f64, prior_samples: Vec<f64>) -> Result<Self> {
        if prior_samples.is_empty() || prior_samples.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidConfig("mixture needs at least one finite point".into()));
        }
        if !theta0.is_finite() {
            return Err(Error::InvalidConfig("null value must be finite".into()));
        }
        Ok(Self {
            theta0,
            log_num: vec![0.0; prior_samples.len()],
            prior_samples,
            log_den: 0.0,
            log_l: 0.0,
            max_log_l: 0.0,
            max_history: Vec::new(),
            blocks_seen: 0,
            skipped_blocks: 0,
            last_index: None,
            eval: KdeEval::default(),
            exec: Exec::default(),
        })
    }

    pub fn with_eval(mut self, eval: KdeEval) -> Self {
        self.eval = eval;
        self
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn theta0(&self) -> f64 {
        self.theta0
    }

    pub fn prior_samples(&self) -> &[f64] {
        &self.prior_samples
    }

    pub fn blocks_seen(&self) -> usize {
        self.blocks_seen
    }

    pub fn skipped_blocks(&self) -> usize {
        self.skipped_blocks
    }

    /// `ln L_n` for the latest update (0 before any).
    pub fn log_likelihood_ratio(&self) -> f64 {
        self.log_l
    }

    pub fn max_log_likelihood_ratio(&self) -> f64 {
        self.max_log_l
    }

    fn check_order(&mut self, index: usize) -> Result<()> {
        if let Some(last) = self.last_index {
            if index <= last {
                return Err(Error::OutOfOrderBlock { got: index, last });
            }
        }
        self.last_index = Some(index);
        Ok(())
    }

    pub fn update(&mut self, summary: &BlockSummary) -> Result<Step> {
        self.update_shifted(summary, 0.0)
    }

    /// Update with the block estimate shifted by `offset`. The density is
    /// unaffected: the bootstrap samples are centered on the block estimate.
    pub fn update_shifted(&mut self, summary: &BlockSummary, offset: f64) -> Result<Step> {
        if !(summary.sigma > 0.0) {
            return Err(Error::ZeroSigma);
        }
        self.check_order(summary.block_index)?;
        let theta_hat = summary.theta_hat + offset;
        let inv_sigma = 1.0 / summary.sigma;
        let x0 = (theta_hat - self.theta0) * inv_sigma;
        let density = &summary.density;
        let prior = &self.prior_samples;

        match self.eval {
            KdeEval::Exact => {
                self.log_den += density.log_eval(x0);
                self.exec.for_each_mut(&mut self.log_num, 256, |m, acc| {
                    *acc += density.log_eval((theta_hat - prior[m]) * inv_sigma);
                });
            }
            KdeEval::Tabulated { nodes_per_bandwidth } => {
                let (pmin, pmax) = prior
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| (a.min(t), b.max(t)));
                let lo_pt = ((theta_hat - pmax) * inv_sigma).min(x0);
                let hi_pt = ((theta_hat - pmin) * inv_sigma).max(x0);
                // Far outside the centers the table would only buy accuracy
                // nobody needs; those points go through the exact path.
                let reach = 40.0 * density.bandwidth();
                let centers = density.centers();
                let lo = lo_pt.max(centers[0] - reach);
                let hi = hi_pt.min(centers[centers.len() - 1] + reach);
                let table = density.tabulate(lo, hi, nodes_per_bandwidth, self.exec);
                self.log_den += table.log_eval(x0);
                self.exec.for_each_mut(&mut self.log_num, 1024, |m, acc| {
                    *acc += table.log_eval((theta_hat - prior[m]) * inv_sigma);
                });
            }
        }

        let m = self.log_num.len() as f64;
        let (max, rest) = log_sum_exp(&self.log_num);
        // Grouped so a point mass at θ0 gives exactly zero.
        self.log_l = (max - self.log_den) + (rest - m.ln());
        self.max_log_l = self.max_log_l.max(self.log_l);
        self.max_history.push(self.max_log_l);
        self.blocks_seen += 1;
        Ok(Step {
            block_index: summary.block_index,
            theta_hat,
            sigma: summary.sigma,
            log_l: self.log_l,
            p_value: self.p_value(),
        })
    }

    /// Records a degenerate block: it contributes a likelihood factor of one.
    pub fn skip(&mut self, block_index: usize) -> Result<()> {
        self.check_order(block_index)?;
        self.skipped_blocks += 1;
        Ok(())
    }

    /// `min(1, 1/max_{t≤n} L_t)`, clamped away from zero.
    pub fn p_value(&self) -> f64 {
        p_from_max_log(self.max_log_l)
    }

    /// `RejectNull` iff the p-value is at or below `alpha`. Once rejected at
    /// some level the state stays rejected, since the p-value never grows.
    pub fn decide(&self, alpha: f64) -> Decision {
        let p_value = self.p_value();
        if p_value <= alpha {
            let first = self.max_history.partition_point(|&m| p_from_max_log(m) > alpha);
            Decision { tag: DecisionTag::RejectNull, at_block: first + 1, p_value }
        } else {
            Decision { tag: DecisionTag::Continue, at_block: self.blocks_seen, p_value }
        }
    }
}

fn p_from_max_log(max_log_l: f64) -> f64 {
    (-max_log_l).exp().clamp(f64::MIN_POSITIVE, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bootstrap::{fit_kde, Bandwidth};

    fn summary(index: usize, theta_hat: f64, sigma: f64, centers: &[f64]) -> BlockSummary {
        BlockSummary {
            block_index: index,
            theta_hat,
            sigma,
            density: fit_kde(centers, Bandwidth::Fixed(0.5)).unwrap(),
        }
    }

    fn prior() -> Prior {
        Prior::normal(0.0, 0.1, 2000, 17).unwrap()
    }

    #[test]
    fn fresh_state() {
        let s = init_state(0.0, &prior()).unwrap();
        assert_eq!(s.p_value(), 1.0);
        assert_eq!(s.log_likelihood_ratio(), 0.0);
        assert_eq!(s.decide(0.05).tag, DecisionTag::Continue);
        assert_eq!(s.blocks_seen(), 0);
    }

    #[test]
    fn prior_validation() {
        assert!(Prior::normal(0.0, 0.0, 5000, 1).is_err());
        assert!(Prior::normal(0.0, 1.0, 999, 1).is_err());
        assert_eq!(prior().draw(), prior().draw());
        assert_ne!(prior().draw(), prior().reseeded(18).draw());
    }

    #[test]
    fn prior_mean_within_clt_bound() {
        let tau = 0.4;
        let p = Prior::normal(0.0, tau, 10_000, 99).unwrap();
        let mean = p.draw().iter().sum::<f64>() / 10_000.0;
        assert!(mean.abs() <= 4.0 * tau / 100.0, "{mean}");
    }

    #[test]
    fn point_mass_at_null_keeps_l_at_one() {
        for eval in [KdeEval::Exact, KdeEval::default()] {
            let mut s = MsprtState::with_mixture(0.3, vec![0.3; 50]).unwrap().with_eval(eval);
            for k in 0..10 {
                let st = s.update(&summary(k, 0.3 + 0.05 * k as f64, 0.1, &[-1.0, 0.2, 0.9])).unwrap();
                assert_eq!(st.log_l, 0.0);
            }
            assert_eq!(s.p_value(), 1.0);
        }
    }

    #[test]
    fn evidence_near_prior_point_increases_l() {
        let mut s = MsprtState::with_mixture(0.0, vec![2.0; 10]).unwrap();
        let st = s.update(&summary(0, 2.0, 1.0, &[0.0])).unwrap();
        assert!(st.log_l > 0.0);
        let before = st.log_l;
        let st = s.update(&summary(1, 2.0, 1.0, &[0.0])).unwrap();
        assert!(st.log_l > before);
    }

    #[test]
    fn p_value_examples() {
        let mut s = MsprtState::with_mixture(0.0, vec![0.0]).unwrap();
        for l in [0.5f64, 2.0, 1.0] {
            s.max_log_l = s.max_log_l.max(l.ln());
        }
        assert!((s.p_value() - 0.5).abs() < 1e-15);

        let mut s = MsprtState::with_mixture(0.0, vec![0.0]).unwrap();
        s.max_log_l = s.max_log_l.max(0.3f64.ln()).max(0.9f64.ln());
        assert_eq!(s.p_value(), 1.0);

        s.max_log_l = 100f64.ln();
        assert!((s.p_value() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn decide_thresholds() {
        let mut s = MsprtState::with_mixture(0.0, vec![0.0]).unwrap();
        s.max_log_l = 25f64.ln();
        s.max_history = vec![1.0, 25f64.ln()];
        s.blocks_seen = 2;
        let d = s.decide(0.05);
        assert_eq!(d.tag, DecisionTag::RejectNull);
        assert_eq!(d.at_block, 2);
        s.max_log_l = 10f64.ln();
        assert_eq!(s.decide(0.05).tag, DecisionTag::Continue);
    }

    #[test]
    fn out_of_order_and_zero_sigma() {
        let mut s = init_state(0.0, &prior()).unwrap();
        s.update(&summary(3, 0.1, 0.1, &[0.0, 0.5])).unwrap();
        assert!(matches!(
            s.update(&summary(3, 0.1, 0.1, &[0.0, 0.5])),
            Err(Error::OutOfOrderBlock { got: 3, last: 3 })
        ));
        let mut z = summary(4, 0.1, 0.1, &[0.0, 0.5]);
        z.sigma = 0.0;
        assert_eq!(s.update(&z).unwrap_err(), Error::ZeroSigma);
        s.skip(5).unwrap();
        assert_eq!(s.skipped_blocks(), 1);
        assert_eq!(s.blocks_seen(), 1);
    }

    #[test]
    fn tabulated_matches_exact() {
        let centers: Vec<f64> = (0..300).map(|i| ((i as f64) * 0.37).sin() * 1.5).collect();
        let p = prior();
        let mut a = init_state(0.0, &p).unwrap().with_eval(KdeEval::Exact);
        let mut b = init_state(0.0, &p).unwrap();
        for k in 0..20 {
            let sm = BlockSummary {
                block_index: k,
                theta_hat: 0.05 * ((k as f64) * 1.3).cos(),
                sigma: 0.08,
                density: fit_kde(&centers, Bandwidth::Silverman).unwrap(),
            };
            let sa = a.update(&sm).unwrap();
            let sb = b.update(&sm).unwrap();
            assert!((sa.log_l - sb.log_l).abs() < 1e-4, "{} vs {}", sa.log_l, sb.log_l);
        }
    }

    #[test]
    fn p_value_nonincreasing_and_in_range() {
        let mut s = init_state(0.0, &prior()).unwrap();
        let mut last = 1.0;
        for k in 0..40 {
            let st = s.update(&summary(k, 0.03 * (k as f64).sin(), 0.05, &[-0.8, 0.0, 0.6, 1.1])).unwrap();
            assert!(st.p_value <= last && st.p_value > 0.0 && st.p_value <= 1.0);
            last = st.p_value;
        }
    }

    #[test]
    fn update_record_json_fields() {
        let rec = Step { block_index: 2, theta_hat: 0.1, sigma: 0.2, log_l: 1.5, p_value: 0.22 }.with_decision(0.05);
        let v: serde_json::Value = serde_json::to_value(rec).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["block_index", "decision", "log_L", "p_value", "sigma", "theta_hat"]);
        assert_eq!(v["decision"], "Continue");
    }
}
