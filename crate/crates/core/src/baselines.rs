//! Comparison tests: the fixed-sample z-test, the same z-test misused with
//! repeated looks, and a two-sample Bernoulli MaxSPRT.

use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::exec::Exec;
use crate::harness::split_mask;
use crate::metrics::{self, MetricKind, SessionRecord, StdErrMethod};
use crate::{seed, Error, Result};

/// `2(1 − Φ(|z|))`.
pub fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

/// Two-sided z-test for a difference in `kind` between the groups, using
/// each group's default standard error.
pub fn z_test(group_a: &[SessionRecord], group_b: &[SessionRecord], kind: &MetricKind) -> Result<f64> {
    if group_a.len() < 2 || group_b.len() < 2 {
        return Err(Error::InvalidInput("z-test needs at least two records per group".into()));
    }
    let a = metrics::estimate(group_a, kind, StdErrMethod::Default)?;
    let b = metrics::estimate(group_b, kind, StdErrMethod::Default)?;
    let pooled = a.sigma.hypot(b.sigma);
    if !(pooled > 0.0) {
        return Err(Error::DegenerateBlock("zero pooled variance".into()));
    }
    Ok(two_sided_p((b.theta_hat - a.theta_hat) / pooled))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChasingOutcome {
    /// Smallest p-value over all looks.
    pub min_p: f64,
    /// p-value at the last look (the whole dataset).
    pub final_p: f64,
    pub ever_rejected: bool,
}

/// Splits `records` A/A with `split_seed` and runs the z-test on `looks`
/// evenly spaced prefixes of the data, as someone watching a dashboard would.
/// Looks where a group is still too small or degenerate count as p = 1.
pub fn chasing_significance_trial(
    records: &[SessionRecord],
    kind: &MetricKind,
    looks: usize,
    alpha: f64,
    split_seed: u64,
) -> Result<ChasingOutcome> {
    if looks == 0 {
        return Err(Error::InvalidConfig("looks must be positive".into()));
    }
    if records.len() < 4 {
        return Err(Error::InvalidInput("need at least four records for an A/A split".into()));
    }
    let in_b = split_mask(records.len(), split_seed);
    let n = records.len();
    let mut min_p = 1.0f64;
    let mut final_p = 1.0;
    for look in 1..=looks {
        let end = (n * look).div_ceil(looks);
        let (a, b): (Vec<SessionRecord>, Vec<SessionRecord>) = {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for (r, &to_b) in records[..end].iter().zip(&in_b) {
                if to_b { b.push(*r) } else { a.push(*r) }
            }
            (a, b)
        };
        let p = match z_test(&a, &b, kind) {
            Ok(p) => p,
            Err(Error::DegenerateBlock(_) | Error::InvalidInput(_)) => 1.0,
            Err(e) => return Err(e),
        };
        min_p = min_p.min(p);
        final_p = p;
    }
    Ok(ChasingOutcome { min_p, final_p, ever_rejected: min_p <= alpha })
}

fn xlogx(x: f64) -> f64 {
    if x <= 0.0 { 0.0 } else { x * x.ln() }
}

/// Maximized Bernoulli log-likelihood of `n` trials at observed rate `p`.
fn max_loglik(p: f64, n: f64) -> f64 {
    n * (xlogx(p) + xlogx(1.0 - p))
}

/// Log-likelihood ratio of separate rates against a common rate, from the
/// observed rates of the two arms. Rates may be fractional, which is how an
/// additive offset enters.
pub fn maxsprt_llr_from_rates(rate_a: f64, n_a: f64, rate_b: f64, n_b: f64) -> f64 {
    if n_a <= 0.0 || n_b <= 0.0 {
        return 0.0;
    }
    let pooled = (rate_a * n_a + rate_b * n_b) / (n_a + n_b);
    let llr = max_loglik(rate_a, n_a) + max_loglik(rate_b, n_b) - max_loglik(pooled, n_a + n_b);
    llr.max(0.0)
}

/// `ln` of the Bernoulli likelihood maximized over two free rates divided by
/// the likelihood maximized under one common rate. Uses `0·ln 0 = 0`.
pub fn maxsprt_bernoulli_llr(successes_a: u64, n_a: u64, successes_b: u64, n_b: u64) -> f64 {
    assert!(successes_a <= n_a && successes_b <= n_b, "successes exceed trials");
    if n_a == 0 || n_b == 0 {
        return 0.0;
    }
    maxsprt_llr_from_rates(
        successes_a as f64 / n_a as f64,
        n_a as f64,
        successes_b as f64 / n_b as f64,
        n_b as f64,
    )
}

/// Two-sample Bernoulli MaxSPRT monitored once per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxSprtConfig {
    /// Baseline success rate used for calibration.
    pub p0: f64,
    /// Rejection bound on the log-likelihood ratio.
    pub threshold: f64,
    /// Horizon, in records per arm.
    pub max_samples: usize,
    /// Records per arm between looks.
    pub block_size: usize,
}

impl MaxSprtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p0 > 0.0 && self.p0 < 1.0) {
            return Err(Error::InvalidConfig(format!("p0 must lie in (0, 1), got {}", self.p0)));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::InvalidConfig("threshold must be positive".into()));
        }
        if self.block_size == 0 || self.max_samples < self.block_size {
            return Err(Error::InvalidConfig("need 0 < block_size <= max_samples".into()));
        }
        Ok(())
    }
}

/// Geometric grid of `points` thresholds over `[ln 2, ln 10⁴]`.
pub fn default_threshold_grid(points: usize) -> Vec<f64> {
    let (lo, hi) = (2f64.ln(), 1e4f64.ln());
    if points <= 1 {
        return vec![lo];
    }
    let ratio = (hi / lo).powf(1.0 / (points - 1) as f64);
    (0..points).map(|i| lo * ratio.powi(i as i32)).collect()
}

/// Largest LLR over the looks of one null trial: both arms `Bernoulli(p0)`,
/// one look per block, up to `max_samples` per arm.
fn null_trial_max_llr(p0: f64, block_size: usize, max_samples: usize, trial_seed: u64) -> f64 {
    let binom = Binomial::new(block_size as u64, p0).expect("valid rate");
    let mut rng = seed::rng(trial_seed);
    let (mut sa, mut sb, mut n) = (0u64, 0u64, 0u64);
    let mut best = 0.0f64;
    for _ in 0..max_samples / block_size {
        sa += binom.sample(&mut rng);
        sb += binom.sample(&mut rng);
        n += block_size as u64;
        best = best.max(maxsprt_bernoulli_llr(sa, n, sb, n));
    }
    best
}

/// Fraction of null trials whose LLR ever exceeds `threshold`.
pub fn maxsprt_null_rejection_rate(cfg: &MaxSprtConfig, trials: usize, seed: u64, exec: Exec) -> Result<f64> {
    cfg.validate()?;
    let maxima = exec.map(trials, 8, |t| null_trial_max_llr(cfg.p0, cfg.block_size, cfg.max_samples, seed::derive(seed, t as u64)));
    Ok(maxima.iter().filter(|&&m| m > cfg.threshold).count() as f64 / trials as f64)
}

/// Smallest grid threshold whose simulated type-1 error is at most `alpha`.
/// `cfg.threshold` is ignored.
pub fn calibrate_maxsprt_threshold(
    cfg: &MaxSprtConfig,
    alpha: f64,
    trials: usize,
    seed: u64,
    grid: &[f64],
    exec: Exec,
) -> Result<f64> {
    if trials < 200 {
        return Err(Error::InvalidConfig(format!("calibration needs at least 200 trials, got {trials}")));
    }
    MaxSprtConfig { threshold: 1.0, ..cfg.clone() }.validate()?;
    let maxima = exec.map(trials, 8, |t| null_trial_max_llr(cfg.p0, cfg.block_size, cfg.max_samples, seed::derive(seed, t as u64)));
    let mut sorted_grid = grid.to_vec();
    sorted_grid.sort_by(f64::total_cmp);
    sorted_grid
        .into_iter()
        .find(|&th| maxima.iter().filter(|&&m| m > th).count() as f64 / trials as f64 <= alpha)
        .ok_or(Error::CalibrationFailed { alpha })
}

/// Outcome of MaxSPRT on one pair of streams.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxSprtOutcome {
    pub max_llr: f64,
    /// 1-based look at which the threshold was first exceeded.
    pub rejected_at: Option<usize>,
}

/// Runs MaxSPRT over paired blocks of `block_size` records (successful
/// queries over queries), with `offset` added to the rate of arm B.
pub fn run_maxsprt(
    group_a: &[SessionRecord],
    group_b: &[SessionRecord],
    cfg: &MaxSprtConfig,
    offset: f64,
) -> Result<MaxSprtOutcome> {
    cfg.validate()?;
    let looks = group_a.len().min(group_b.len()).min(cfg.max_samples) / cfg.block_size;
    let (mut sa, mut qa, mut sb, mut qb) = (0u64, 0u64, 0u64, 0u64);
    let mut max_llr = 0.0f64;
    for k in 0..looks {
        let range = k * cfg.block_size..(k + 1) * cfg.block_size;
        for r in &group_a[range.clone()] {
            sa += r.successful_queries as u64;
            qa += r.queries as u64;
        }
        for r in &group_b[range] {
            sb += r.successful_queries as u64;
            qb += r.queries as u64;
        }
        if qa == 0 || qb == 0 {
            continue;
        }
        let rate_a = sa as f64 / qa as f64;
        let rate_b = (sb as f64 / qb as f64 + offset).clamp(0.0, 1.0);
        let llr = maxsprt_llr_from_rates(rate_a, qa as f64, rate_b, qb as f64);
        max_llr = max_llr.max(llr);
        if llr > cfg.threshold {
            return Ok(MaxSprtOutcome { max_llr, rejected_at: Some(k + 1) });
        }
    }
    Ok(MaxSprtOutcome { max_llr, rejected_at: None })
}

/// Convenience: z-test p-values over many A/A splits, first and repeated look.
pub fn chasing_significance_trials(
    records: &[SessionRecord],
    kind: &MetricKind,
    looks: usize,
    alpha: f64,
    trials: usize,
    split_seed: u64,
    exec: Exec,
) -> Result<Vec<ChasingOutcome>> {
    exec.map(trials, 1, |t| chasing_significance_trial(records, kind, looks, alpha, seed::derive(split_seed, t as u64)))
        .into_iter()
        .collect()
}
