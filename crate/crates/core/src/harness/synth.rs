//! Synthetic session generators.

use rand::Rng;
use rand_distr::{Bernoulli, Beta, Binomial, Distribution, Geometric, LogNormal};
use serde::{Deserialize, Serialize};

use crate::metrics::SessionRecord;
use crate::{seed, Error, Result};

/// First synthetic timestamp (epoch ms); sessions are one second apart.
pub const BASE_TIMESTAMP: i64 = 1_500_000_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "model")]
pub enum SessionModel {
    /// Per-session success probability `p ~ Beta(a, b)`, query count
    /// `1 + Geometric` with the given mean, successes `Binomial(queries, p)`.
    /// Queries within a session share `p`, so they are correlated.
    CorrelatedQueries { mean_queries: f64, success_beta: (f64, f64) },
    /// Revenue is zero with probability `p_zero`, else `LogNormal(log_mean, log_sd)`.
    /// Every session has one query, successful iff revenue is positive.
    ZeroInflatedRevenue { p_zero: f64, log_mean: f64, log_sd: f64 },
    /// One query per session, successful with probability `p`; revenue
    /// mirrors the outcome.
    Bernoulli { p: f64 },
}

impl SessionModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        match *self {
            SessionModel::CorrelatedQueries { mean_queries, success_beta: (a, b) } => {
                if !(mean_queries >= 1.0 && mean_queries.is_finite()) {
                    return bad(format!("mean_queries must be at least 1, got {mean_queries}"));
                }
                if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                    return bad(format!("beta parameters must be positive, got ({a}, {b})"));
                }
            }
            SessionModel::ZeroInflatedRevenue { p_zero, log_mean, log_sd } => {
                if !(p_zero > 0.0 && p_zero < 1.0) {
                    return bad(format!("p_zero must lie in (0, 1), got {p_zero}"));
                }
                if !(log_sd > 0.0 && log_sd.is_finite() && log_mean.is_finite()) {
                    return bad("log-normal parameters must be finite with positive sd".into());
                }
            }
            SessionModel::Bernoulli { p } => {
                if !(p > 0.0 && p < 1.0) {
                    return bad(format!("p must lie in (0, 1), got {p}"));
                }
            }
        }
        Ok(())
    }

    /// Population value of the query success rate (ratio of expectations).
    pub fn success_rate(&self) -> f64 {
        match *self {
            SessionModel::CorrelatedQueries { success_beta: (a, b), .. } => a / (a + b),
            SessionModel::ZeroInflatedRevenue { p_zero, .. } => 1.0 - p_zero,
            SessionModel::Bernoulli { p } => p,
        }
    }

    /// Population mean revenue per session.
    pub fn mean_revenue(&self) -> f64 {
        match *self {
            SessionModel::CorrelatedQueries { .. } => 0.0,
            SessionModel::ZeroInflatedRevenue { p_zero, log_mean, log_sd } => {
                (1.0 - p_zero) * (log_mean + 0.5 * log_sd * log_sd).exp()
            }
            SessionModel::Bernoulli { p } => p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_sessions: usize,
    pub model: SessionModel,
    pub rng_seed: u64,
}

/// Deterministic given the seed.
pub fn generate_sessions(cfg: &SyntheticConfig) -> Result<Vec<SessionRecord>> {
    if cfg.n_sessions == 0 {
        return Err(Error::InvalidConfig("n_sessions must be positive".into()));
    }
    cfg.model.validate()?;
    let mut rng = seed::rng(cfg.rng_seed);
    let ts = |i: usize| BASE_TIMESTAMP + 1000 * i as i64;
    let out = match cfg.model {
        SessionModel::CorrelatedQueries { mean_queries, success_beta: (a, b) } => {
            let beta = Beta::new(a, b).expect("validated");
            let extra = Geometric::new(1.0 / mean_queries).expect("validated");
            (0..cfg.n_sessions)
                .map(|i| {
                    let p = beta.sample(&mut rng);
                    let q = 1 + extra.sample(&mut rng).min(u32::MAX as u64 - 1) as u32;
                    let s = Binomial::new(q as u64, p).expect("p in [0, 1]").sample(&mut rng) as u32;
                    SessionRecord { timestamp: ts(i), queries: q, successful_queries: s, revenue: 0.0 }
                })
                .collect()
        }
        SessionModel::ZeroInflatedRevenue { p_zero, log_mean, log_sd } => {
            let ln = LogNormal::new(log_mean, log_sd).expect("validated");
            (0..cfg.n_sessions)
                .map(|i| {
                    let revenue = if rng.random::<f64>() < p_zero { 0.0 } else { ln.sample(&mut rng) };
                    let s = (revenue > 0.0) as u32;
                    SessionRecord { timestamp: ts(i), queries: 1, successful_queries: s, revenue }
                })
                .collect()
        }
        SessionModel::Bernoulli { p } => {
            let bern = Bernoulli::new(p).expect("validated");
            (0..cfg.n_sessions)
                .map(|i| {
                    let s = bern.sample(&mut rng) as u32;
                    SessionRecord { timestamp: ts(i), queries: 1, successful_queries: s, revenue: s as f64 }
                })
                .collect()
        }
    };
    Ok(out)
}
