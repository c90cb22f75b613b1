//! Nonparametric bootstrap of the studentized statistic and the Gaussian
//! kernel density estimate of its distribution.
//!
//! Resample `b` of a block draws from ChaCha8 substream `b` of the block seed,
//! so the `B` resamples can be generated in any order (or in parallel) and the
//! output sequence is always the same.

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::metrics::{self, delta_ratio_se, Block, MetricEstimate, MetricKind, SessionRecord, StdErrMethod};
use crate::{seed, Error, Result};

/// Smallest accepted resample count.
pub const MIN_RESAMPLES: usize = 100;
/// Attempts per resample before a block is declared degenerate. With `B`
/// resamples this caps the total number of draws at `100·B`.
pub const MAX_ATTEMPTS_PER_RESAMPLE: usize = 100;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// `0.9 · min(sd, iqr/1.34) · B^(−1/5)`.
    Silverman,
    Fixed(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// Number of resamples `B`.
    pub resamples: usize,
    pub bandwidth: Bandwidth,
    pub stderr: StdErrMethod,
    /// Master seed; each block derives its own stream from it.
    pub rng_seed: u64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 1000,
            bandwidth: Bandwidth::Silverman,
            stderr: StdErrMethod::Default,
            rng_seed: 0,
            exec: Exec::default(),
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resamples < MIN_RESAMPLES {
            return Err(Error::InvalidConfig(format!(
                "bootstrap resamples must be at least {MIN_RESAMPLES}, got {}",
                self.resamples
            )));
        }
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {h}")));
            }
        }
        Ok(())
    }

    /// Seed of the resample streams for block `index`.
    pub fn block_seed(&self, index: usize) -> u64 {
        seed::derive(self.rng_seed, index as u64)
    }
}

/// Draws `N` records uniformly with replacement.
pub fn resample<R: Rng + ?Sized>(block: &Block, rng: &mut R) -> Block {
    let recs = block.records();
    let pick = Uniform::new(0, recs.len() as u32).expect("blocks are nonempty");
    let out = (0..recs.len()).map(|_| recs[pick.sample(rng) as usize]).collect();
    Block::new(block.index(), out).expect("nonempty")
}

/// Precomputed view of a block that evaluates (estimate, standard error) on
/// bootstrap resamples without materializing them.
///
/// The built-in metrics only need a handful of centered moments, so each draw
/// is one random index and a few additions. Everything else falls back to
/// gathering the resample and running the ordinary estimator.
#[derive(Debug, Clone)]
pub(crate) struct Resampler {
    n: usize,
    pick: Uniform<u32>,
    kernel: Kernel,
}

#[derive(Debug, Clone)]
enum Kernel {
    /// Interleaved `(s − s̄, q − q̄)` pairs.
    Ratio { dev: Vec<[f64; 2]>, mean_s: f64, mean_q: f64 },
    Mean { dev: Vec<f64>, mean: f64 },
    Generic { records: Vec<SessionRecord>, kind: MetricKind, method: StdErrMethod },
}

impl Resampler {
    pub(crate) fn new(records: &[SessionRecord], kind: &MetricKind, method: StdErrMethod) -> Result<Self> {
        let n = records.len();
        if n < 2 {
            return Err(Error::InvalidInput("bootstrap needs at least two records".into()));
        }
        let nf = n as f64;
        let kernel = match (kind, method) {
            (MetricKind::QuerySuccessRate, StdErrMethod::Default) => {
                let mean_s = records.iter().map(|r| r.successful_queries as f64).sum::<f64>() / nf;
                let mean_q = records.iter().map(|r| r.queries as f64).sum::<f64>() / nf;
                let dev = records
                    .iter()
                    .map(|r| [r.successful_queries as f64 - mean_s, r.queries as f64 - mean_q])
                    .collect();
                Kernel::Ratio { dev, mean_s, mean_q }
            }
            (MetricKind::MeanRevenue, StdErrMethod::Default) => {
                let mean = records.iter().map(|r| r.revenue).sum::<f64>() / nf;
                Kernel::Mean { dev: records.iter().map(|r| r.revenue - mean).collect(), mean }
            }
            _ => Kernel::Generic { records: records.to_vec(), kind: kind.clone(), method },
        };
        Ok(Self { n, pick: Uniform::new(0, n as u32).expect("n >= 2"), kernel })
    }

    /// Estimate on one resample; `None` when the metric is undefined or its
    /// standard error is zero.
    pub(crate) fn draw(&self, rng: &mut ChaCha8Rng) -> Option<MetricEstimate> {
        let nf = self.n as f64;
        match &self.kernel {
            Kernel::Ratio { dev, mean_s, mean_q } => {
                let (mut ss, mut sq, mut sss, mut sqq, mut ssq) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for _ in 0..self.n {
                    let [ds, dq] = dev[self.pick.sample(rng) as usize];
                    ss += ds;
                    sq += dq;
                    sss += ds * ds;
                    sqq += dq * dq;
                    ssq += ds * dq;
                }
                let (as_, aq) = (ss / nf, sq / nf);
                let ms = mean_s + as_;
                let mq = mean_q + aq;
                if !(mq > 0.0) {
                    return None;
                }
                let var_s = sss / nf - as_ * as_;
                let var_q = sqq / nf - aq * aq;
                let cov = ssq / nf - as_ * aq;
                let sigma = delta_ratio_se(nf, ms, mq, var_s, var_q, cov);
                (sigma > 0.0).then(|| MetricEstimate { theta_hat: ms / mq, sigma })
            }
            Kernel::Mean { dev, mean } => {
                let (mut s, mut ss) = (0.0, 0.0);
                for _ in 0..self.n {
                    let d = dev[self.pick.sample(rng) as usize];
                    s += d;
                    ss += d * d;
                }
                let var = ((ss - s * s / nf) / (nf - 1.0)).max(0.0);
                let sigma = (var / nf).sqrt();
                (sigma > 0.0).then(|| MetricEstimate { theta_hat: mean + s / nf, sigma })
            }
            Kernel::Generic { records, kind, method } => {
                let star: Vec<SessionRecord> =
                    (0..self.n).map(|_| records[self.pick.sample(rng) as usize]).collect();
                metrics::estimate(&star, kind, *method).ok().filter(|e| e.sigma > 0.0)
            }
        }
    }
}

/// Runs `B` studentized draws, resample `b` on substream `b` of `seed`.
/// `draw` returns `None` for a degenerate resample, which is redrawn.
pub(crate) fn studentized_draws<F>(cfg: &BootstrapConfig, seed: u64, draw: F) -> Result<Vec<f64>>
where
    F: Fn(&mut ChaCha8Rng) -> Option<f64> + Sync + Send,
{
    let out = cfg.exec.map(cfg.resamples, 16, |b| {
        let mut rng = seed::substream(seed, b as u64);
        (0..MAX_ATTEMPTS_PER_RESAMPLE).find_map(|_| draw(&mut rng))
    });
    out.into_iter()
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| Error::DegenerateBlock("too many degenerate bootstrap resamples".into()))
}

/// `s*_b = (T(x*b) − θ̂) / σ(T(x*b))` for `b = 1..B`, with streams keyed by
/// `cfg.rng_seed`.
pub fn bootstrap_studentized_samples(
    records: &[SessionRecord],
    kind: &MetricKind,
    cfg: &BootstrapConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let original = metrics::estimate(records, kind, cfg.stderr)?;
    if !(original.sigma > 0.0) {
        return Err(Error::DegenerateBlock("zero standard error on block".into()));
    }
    let resampler = Resampler::new(records, kind, cfg.stderr)?;
    studentized_draws(cfg, cfg.rng_seed, |rng| {
        resampler.draw(rng).map(|e| (e.theta_hat - original.theta_hat) / e.sigma)
    })
}

/// Type-7 (linear interpolation) quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Silverman's rule of thumb. Falls back to the standard deviation when the
/// interquartile range is zero.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::AllSamplesEqual);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let sd = (samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt();
    if !(sd > 0.0) {
        return Err(Error::AllSamplesEqual);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * (n as f64).powf(-0.2))
}

/// Gaussian kernel density estimate
/// `g(x) = (1/(B·h)) Σ_b φ((x − c_b)/h)`.
///
/// Immutable once built; evaluation is done in log space so the density
/// never underflows to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeDensity {
    /// Sorted kernel centers.
    centers: Vec<f64>,
    bandwidth: f64,
    /// `−ln(B·h·√(2π))`.
    log_norm: f64,
}

pub fn fit_kde(samples: &[f64], rule: Bandwidth) -> Result<KdeDensity> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("kernel density of an empty sample".into()));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("kernel centers must be finite".into()));
    }
    let bandwidth = match rule {
        Bandwidth::Silverman => silverman_bandwidth(samples)?,
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {h}"))),
    };
    let mut centers = samples.to_vec();
    centers.sort_by(f64::total_cmp);
    let log_norm = -((centers.len() as f64).ln() + bandwidth.ln() + LN_SQRT_2PI);
    Ok(KdeDensity { centers, bandwidth, log_norm })
}

impl KdeDensity {
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// `1/(B·h·√(2π))`.
    pub fn normalization(&self) -> f64 {
        self.log_norm.exp()
    }

    /// Density at `x`. Underflows to zero beyond roughly 38 bandwidths from
    /// every center; use [`log_eval`](Self::log_eval) there.
    pub fn eval(&self, x: f64) -> f64 {
        self.log_eval(x).exp()
    }

    fn nearest_center(&self, x: f64) -> f64 {
        let i = self.centers.partition_point(|&c| c < x);
        match (i.checked_sub(1).map(|j| self.centers[j]), self.centers.get(i)) {
            (Some(a), Some(&b)) => if x - a <= b - x { a } else { b },
            (Some(a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => unreachable!("density has at least one center"),
        }
    }

    /// `ln g(x)` by log-sum-exp over the kernel exponents. Finite for every
    /// finite `x`.
    pub fn log_eval(&self, x: f64) -> f64 {
        self.log_eval_with_slope(x).0
    }

    /// `(ln g(x), d/dx ln g(x))`.
    pub fn log_eval_with_slope(&self, x: f64) -> (f64, f64) {
        let inv_h = 1.0 / self.bandwidth;
        let z0 = (x - self.nearest_center(x)) * inv_h;
        let e_max = -0.5 * z0 * z0;
        let (mut sum, mut wz) = (0.0, 0.0);
        for &c in &self.centers {
            let z = (x - c) * inv_h;
            let w = (-0.5 * z * z - e_max).exp();
            sum += w;
            wz += w * z;
        }
        (self.log_norm + e_max + sum.ln(), -wz / sum * inv_h)
    }

    /// Tabulates `ln g` on `[lo, hi]` at a spacing of at most
    /// `bandwidth / nodes_per_bandwidth`, for fast repeated evaluation.
    pub fn tabulate(&self, lo: f64, hi: f64, nodes_per_bandwidth: u32, exec: Exec) -> LogDensityTable<'_> {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo, lo + self.bandwidth) };
        let max_step = self.bandwidth / nodes_per_bandwidth.max(1) as f64;
        let nodes = ((hi - lo) / max_step).ceil() as usize + 1;
        let step = (hi - lo) / (nodes - 1) as f64;
        let table = exec.map(nodes, 32, |i| self.log_eval_with_slope(lo + i as f64 * step));
        LogDensityTable { density: self, lo, hi, step, inv_step: 1.0 / step, table }
    }
}

/// Piecewise cubic Hermite interpolant of `ln g` with exact node slopes.
/// Points outside the tabulated range are evaluated exactly.
#[derive(Debug, Clone)]
pub struct LogDensityTable<'a> {
    density: &'a KdeDensity,
    lo: f64,
    hi: f64,
    step: f64,
    inv_step: f64,
    table: Vec<(f64, f64)>,
}

impl LogDensityTable<'_> {
    pub fn log_eval(&self, x: f64) -> f64 {
        if !(x >= self.lo && x <= self.hi) {
            return self.density.log_eval(x);
        }
        let t = (x - self.lo) * self.inv_step;
        let i = (t as usize).min(self.table.len() - 2);
        let u = t - i as f64;
        let (y0, m0) = self.table[i];
        let (y1, m1) = self.table[i + 1];
        let u2 = u * u;
        let u3 = u2 * u;
        let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
        let h10 = u3 - 2.0 * u2 + u;
        let h01 = -2.0 * u3 + 3.0 * u2;
        let h11 = u3 - u2;
        h00 * y0 + h10 * self.step * m0 + h01 * y1 + h11 * self.step * m1
    }

    pub fn nodes(&self) -> usize {
        self.table.len()
    }
}
