//! Session records, blocks and metric functionals.
//!
//! A metric is a plug-in statistic `T(F̂)` evaluated on the empirical
//! distribution of one block of sessions. Each built-in metric comes with a
//! closed-form standard error; the jackknife covers everything else.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One user session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    /// Epoch milliseconds.
    pub timestamp: i64,
    pub queries: u32,
    pub successful_queries: u32,
    pub revenue: f64,
}

impl SessionRecord {
    pub fn new(timestamp: i64, queries: u32, successful_queries: u32, revenue: f64) -> Result<Self> {
        let rec = Self { timestamp, queries, successful_queries, revenue };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.successful_queries > self.queries {
            return Err(Error::InvalidRecord(format!(
                "successful_queries ({}) exceeds queries ({})",
                self.successful_queries, self.queries
            )));
        }
        if !(self.revenue.is_finite() && self.revenue >= 0.0) {
            return Err(Error::InvalidRecord(format!(
                "revenue must be finite and nonnegative, got {}",
                self.revenue
            )));
        }
        Ok(())
    }
}

/// A full block of `N` consecutive records: the unit of sequential observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    index: usize,
    records: Vec<SessionRecord>,
}

impl Block {
    pub fn new(index: usize, records: Vec<SessionRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidInput("a block needs at least one record".into()));
        }
        Ok(Self { index, records })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn records(&self) -> &[SessionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn into_records(self) -> Vec<SessionRecord> {
        self.records
    }
}

/// Cuts a record stream into blocks of exactly `size` records. A trailing
/// partial block stays buffered and is never emitted.
#[derive(Debug, Clone)]
pub struct Blocker {
    size: usize,
    next_index: usize,
    buf: Vec<SessionRecord>,
}

impl Blocker {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidConfig("block size must be positive".into()));
        }
        Ok(Self { size, next_index: 0, buf: Vec::with_capacity(size) })
    }

    pub fn push(&mut self, record: SessionRecord) -> Option<Block> {
        self.buf.push(record);
        if self.buf.len() < self.size {
            return None;
        }
        let records = std::mem::replace(&mut self.buf, Vec::with_capacity(self.size));
        let block = Block { index: self.next_index, records };
        self.next_index += 1;
        Some(block)
    }

    /// Records waiting for the current block to fill.
    pub fn pending(&self) -> &[SessionRecord] {
        &self.buf
    }

    pub fn block_size(&self) -> usize {
        self.size
    }
}

/// Splits `records` into full blocks, dropping the partial tail.
pub fn chunk_blocks(records: &[SessionRecord], size: usize) -> Result<Vec<Block>> {
    let mut blocker = Blocker::new(size)?;
    Ok(records.iter().filter_map(|r| blocker.push(*r)).collect())
}

/// A user-supplied plug-in statistic. Its standard error always comes from
/// the jackknife.
pub trait Functional: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    /// `None` when the statistic is undefined on these records.
    fn evaluate(&self, records: &[SessionRecord]) -> Option<f64>;
}

#[derive(Debug, Clone)]
pub enum MetricKind {
    /// Average revenue per session.
    MeanRevenue,
    /// Total successful queries over total queries.
    QuerySuccessRate,
    Custom(Arc<dyn Functional>),
}

impl MetricKind {
    pub fn name(&self) -> &str {
        match self {
            MetricKind::MeanRevenue => "mean_revenue",
            MetricKind::QuerySuccessRate => "query_success_rate",
            MetricKind::Custom(f) => f.name(),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_revenue" | "revenue" => Ok(MetricKind::MeanRevenue),
            "query_success_rate" | "qsr" => Ok(MetricKind::QuerySuccessRate),
            other => Err(Error::InvalidConfig(format!("unknown metric `{other}`"))),
        }
    }
}

/// Which standard-error estimator to use.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdErrMethod {
    /// Delta method for the success rate, `s/√N` for the mean, jackknife for
    /// custom functionals.
    #[default]
    Default,
    Jackknife,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricEstimate {
    pub theta_hat: f64,
    /// Standard error of `theta_hat`. Zero only for constant blocks.
    pub sigma: f64,
}

/// Plug-in value of `kind` on `records`.
pub fn compute_metric(records: &[SessionRecord], kind: &MetricKind) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidInput("metric of an empty block".into()));
    }
    match kind {
        MetricKind::MeanRevenue => Ok(records.iter().map(|r| r.revenue).sum::<f64>() / records.len() as f64),
        MetricKind::QuerySuccessRate => {
            let (s, q) = records.iter().fold((0u64, 0u64), |(s, q), r| {
                (s + r.successful_queries as u64, q + r.queries as u64)
            });
            if q == 0 {
                return Err(Error::DegenerateBlock("no queries in block".into()));
            }
            Ok(s as f64 / q as f64)
        }
        MetricKind::Custom(f) => f
            .evaluate(records)
            .ok_or_else(|| Error::DegenerateBlock(format!("{} undefined on block", f.name()))),
    }
}

/// Delta-method standard error of the ratio of sums `Σs/Σq`, from plug-in
/// (divisor `N`) second moments. All arguments are centered moments.
pub(crate) fn delta_ratio_se(n: f64, mean_s: f64, mean_q: f64, var_s: f64, var_q: f64, cov: f64) -> f64 {
    let r = mean_s / mean_q;
    let num = var_s - 2.0 * r * cov + r * r * var_q;
    (num.max(0.0) / (n * mean_q * mean_q)).sqrt()
}

/// Delta-method standard error of the query success rate:
/// `sqrt((var(s) − 2R·cov(s,q) + R²·var(q)) / (N·q̄²))`.
pub fn stderr_delta_ratio(records: &[SessionRecord]) -> Result<f64> {
    let n = records.len();
    if n < 2 {
        return Err(Error::InvalidInput("delta method needs at least two records".into()));
    }
    let nf = n as f64;
    let mean_s = records.iter().map(|r| r.successful_queries as f64).sum::<f64>() / nf;
    let mean_q = records.iter().map(|r| r.queries as f64).sum::<f64>() / nf;
    if mean_q == 0.0 {
        return Err(Error::DegenerateBlock("no queries in block".into()));
    }
    let (mut vs, mut vq, mut c) = (0.0, 0.0, 0.0);
    for r in records {
        let ds = r.successful_queries as f64 - mean_s;
        let dq = r.queries as f64 - mean_q;
        vs += ds * ds;
        vq += dq * dq;
        c += ds * dq;
    }
    Ok(delta_ratio_se(nf, mean_s, mean_q, vs / nf, vq / nf, c / nf))
}

/// `s/√N` with the `N−1` sample standard deviation.
pub fn stderr_mean(values: impl ExactSizeIterator<Item = f64> + Clone) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InvalidInput("standard error needs at least two records".into()));
    }
    let nf = n as f64;
    let mean = values.clone().sum::<f64>() / nf;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    Ok((ss / (nf - 1.0) / nf).sqrt())
}

fn jackknife_from_leave_one_out(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    ((n - 1.0) / n * ss).sqrt()
}

/// Leave-one-out jackknife standard error:
/// `sqrt(((N−1)/N) Σ (θ̂₍₋ᵢ₎ − θ̄₍₋·₎)²)`.
pub fn stderr_jackknife(records: &[SessionRecord], kind: &MetricKind) -> Result<f64> {
    let n = records.len();
    if n < 2 {
        return Err(Error::InvalidInput("jackknife needs at least two records".into()));
    }
    let loo: Vec<f64> = match kind {
        MetricKind::MeanRevenue => {
            let total: f64 = records.iter().map(|r| r.revenue).sum();
            let mean = total / n as f64;
            records
                .iter()
                .map(|r| mean - (r.revenue - mean) / (n as f64 - 1.0))
                .collect()
        }
        MetricKind::QuerySuccessRate => {
            let (s, q) = records.iter().fold((0u64, 0u64), |(s, q), r| {
                (s + r.successful_queries as u64, q + r.queries as u64)
            });
            records
                .iter()
                .map(|r| {
                    let qi = q - r.queries as u64;
                    if qi == 0 {
                        return Err(Error::DegenerateBlock("leave-one-out block has no queries".into()));
                    }
                    Ok((s - r.successful_queries as u64) as f64 / qi as f64)
                })
                .collect::<Result<_>>()?
        }
        MetricKind::Custom(f) => {
            let mut scratch = Vec::with_capacity(n - 1);
            (0..n)
                .map(|i| {
                    scratch.clear();
                    scratch.extend_from_slice(&records[..i]);
                    scratch.extend_from_slice(&records[i + 1..]);
                    f.evaluate(&scratch).ok_or_else(|| {
                        Error::DegenerateBlock(format!("{} undefined on a leave-one-out block", f.name()))
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(jackknife_from_leave_one_out(&loo))
}

/// Standard error of `kind` on `records` under `method`.
pub fn stderr(records: &[SessionRecord], kind: &MetricKind, method: StdErrMethod) -> Result<f64> {
    match (kind, method) {
        (_, StdErrMethod::Jackknife) | (MetricKind::Custom(_), _) => stderr_jackknife(records, kind),
        (MetricKind::QuerySuccessRate, StdErrMethod::Default) => stderr_delta_ratio(records),
        (MetricKind::MeanRevenue, StdErrMethod::Default) => {
            stderr_mean(records.iter().map(|r| r.revenue))
        }
    }
}

/// Point estimate and standard error. `sigma` may be zero; callers that
/// studentize must check.
pub fn estimate(records: &[SessionRecord], kind: &MetricKind, method: StdErrMethod) -> Result<MetricEstimate> {
    Ok(MetricEstimate {
        theta_hat: compute_metric(records, kind)?,
        sigma: stderr(records, kind, method)?,
    })
}

/// `(θ̂ − θ) / σ`.
pub fn studentize(estimate: MetricEstimate, theta: f64) -> Result<f64> {
    if !(estimate.sigma > 0.0) {
        return Err(Error::ZeroSigma);
    }
    Ok((estimate.theta_hat - theta) / estimate.sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn qs(q: u32, s: u32) -> SessionRecord {
        SessionRecord::new(0, q, s, 0.0).unwrap()
    }

    fn rev(r: f64) -> SessionRecord {
        SessionRecord::new(0, 1, 0, r).unwrap()
    }

    #[test]
    fn record_invariants() {
        assert!(SessionRecord::new(0, 2, 3, 0.0).is_err());
        assert!(SessionRecord::new(0, 2, 2, -1.0).is_err());
        assert!(SessionRecord::new(0, 2, 2, f64::NAN).is_err());
        assert!(SessionRecord::new(0, 0, 0, 0.0).is_ok());
    }

    #[test]
    fn blocker_buffers_partial_tail() {
        let recs: Vec<_> = (0..25).map(|i| SessionRecord::new(i, 1, 0, 0.0).unwrap()).collect();
        let blocks = chunk_blocks(&recs, 10).unwrap();
        assert_eq!(blocks.len(), 2);
        assert!(blocks.iter().all(|b| b.len() == 10));
        assert_eq!(blocks[1].index(), 1);
        assert_eq!(blocks[1].records()[0].timestamp, 10);

        let mut b = Blocker::new(10).unwrap();
        for r in &recs {
            b.push(*r);
        }
        assert_eq!(b.pending().len(), 5);
        assert!(Blocker::new(0).is_err());
    }

    #[test]
    fn success_rate_examples() {
        let m = compute_metric(&[qs(2, 1), qs(3, 2)], &MetricKind::QuerySuccessRate).unwrap();
        assert_eq!(m, 0.6);
        let all = compute_metric(&[qs(2, 2), qs(5, 5), qs(1, 1)], &MetricKind::QuerySuccessRate).unwrap();
        assert_eq!(all, 1.0);
        assert!(matches!(
            compute_metric(&[qs(0, 0), qs(0, 0)], &MetricKind::QuerySuccessRate),
            Err(Error::DegenerateBlock(_))
        ));
    }

    #[test]
    fn mean_revenue_example() {
        let m = compute_metric(&[rev(0.0), rev(10.0), rev(2.0)], &MetricKind::MeanRevenue).unwrap();
        assert_eq!(m, 4.0);
    }

    #[test]
    fn delta_zero_on_identical_records() {
        assert_eq!(stderr_delta_ratio(&[qs(3, 1); 5]).unwrap(), 0.0);
    }

    #[test]
    fn delta_two_record_value() {
        // Plug-in moments: var(s)=var(q)=cov=1/4, R=3/5, q̄=5/2.
        let se = stderr_delta_ratio(&[qs(2, 1), qs(3, 2)]).unwrap();
        assert!((se - 0.0032f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn delta_scale_invariance() {
        let base = [qs(2, 1), qs(3, 2), qs(7, 3), qs(1, 0)];
        let se = stderr_delta_ratio(&base).unwrap();
        let r = compute_metric(&base, &MetricKind::QuerySuccessRate).unwrap();
        // Power-of-two scaling is exact in floating point.
        let x4: Vec<_> = base.iter().map(|x| qs(x.queries * 4, x.successful_queries * 4)).collect();
        assert_eq!(stderr_delta_ratio(&x4).unwrap(), se);
        assert_eq!(compute_metric(&x4, &MetricKind::QuerySuccessRate).unwrap(), r);
        let x3: Vec<_> = base.iter().map(|x| qs(x.queries * 3, x.successful_queries * 3)).collect();
        assert!((stderr_delta_ratio(&x3).unwrap() - se).abs() <= 1e-12 * se);
    }

    #[test]
    fn jackknife_of_mean_hand_computed() {
        // Leave-one-out means 2.5, 2.0, 1.5.
        let se = stderr_jackknife(&[rev(1.0), rev(2.0), rev(3.0)], &MetricKind::MeanRevenue).unwrap();
        assert!((se - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(stderr_jackknife(&[rev(4.0); 6], &MetricKind::MeanRevenue).unwrap(), 0.0);
    }

    #[test]
    fn jackknife_ratio_degenerate_leave_one_out() {
        let recs = [qs(3, 1), qs(0, 0), qs(0, 0)];
        assert!(matches!(
            stderr_jackknife(&recs, &MetricKind::QuerySuccessRate),
            Err(Error::DegenerateBlock(_))
        ));
    }

    #[derive(Debug)]
    struct MaxRevenue;

    impl Functional for MaxRevenue {
        fn name(&self) -> &str {
            "max_revenue"
        }
        fn evaluate(&self, records: &[SessionRecord]) -> Option<f64> {
            records.iter().map(|r| r.revenue).reduce(f64::max)
        }
    }

    #[derive(Debug)]
    struct Mean;

    impl Functional for Mean {
        fn name(&self) -> &str {
            "mean"
        }
        fn evaluate(&self, records: &[SessionRecord]) -> Option<f64> {
            (!records.is_empty()).then(|| records.iter().map(|r| r.revenue).sum::<f64>() / records.len() as f64)
        }
    }

    #[test]
    fn custom_functionals_use_jackknife() {
        let recs = [rev(1.0), rev(5.0), rev(2.0), rev(3.5)];
        let custom = MetricKind::Custom(Arc::new(Mean));
        let a = stderr(&recs, &custom, StdErrMethod::Default).unwrap();
        let b = stderr_jackknife(&recs, &MetricKind::MeanRevenue).unwrap();
        assert!((a - b).abs() < 1e-12);
        let max = MetricKind::Custom(Arc::new(MaxRevenue));
        assert_eq!(compute_metric(&recs, &max).unwrap(), 5.0);
        assert!(stderr(&recs, &max, StdErrMethod::Default).unwrap() > 0.0);
    }

    #[test]
    fn studentize_examples() {
        let s = studentize(MetricEstimate { theta_hat: 0.6, sigma: 0.1 }, 0.5).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(studentize(MetricEstimate { theta_hat: 0.6, sigma: 0.1 }, 0.6).unwrap(), 0.0);
        let s = studentize(MetricEstimate { theta_hat: 0.5, sigma: 0.05 }, 0.6).unwrap();
        assert!((s + 2.0).abs() < 1e-12);
        assert_eq!(studentize(MetricEstimate { theta_hat: 0.5, sigma: 0.0 }, 0.6), Err(Error::ZeroSigma));
    }

    #[test]
    fn metric_kind_parses() {
        assert!(matches!("query_success_rate".parse(), Ok(MetricKind::QuerySuccessRate)));
        assert!(matches!("mean_revenue".parse(), Ok(MetricKind::MeanRevenue)));
        assert!("median".parse::<MetricKind>().is_err());
    }

    fn arb_block() -> impl Strategy<Value = Vec<SessionRecord>> {
        prop::collection::vec((1u32..20, 0u32..20, 0.0f64..100.0), 2..60).prop_map(|v| {
            v.into_iter()
                .map(|(q, s, r)| SessionRecord::new(0, q, s.min(q), r).unwrap())
                .collect()
        })
    }

    proptest! {
        #[test]
        fn success_rate_in_unit_interval(recs in arb_block()) {
            let m = compute_metric(&recs, &MetricKind::QuerySuccessRate).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
        }

        #[test]
        fn stderrs_permutation_invariant(recs in arb_block(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut shuffled = recs.clone();
            shuffled.shuffle(&mut crate::seed::rng(seed));
            for kind in [MetricKind::QuerySuccessRate, MetricKind::MeanRevenue] {
                for method in [StdErrMethod::Default, StdErrMethod::Jackknife] {
                    let a = stderr(&recs, &kind, method).unwrap();
                    let b = stderr(&shuffled, &kind, method).unwrap();
                    prop_assert!((a - b).abs() <= 1e-9 * a.max(1e-12), "{a} vs {b}");
                }
            }
        }

        #[test]
        fn jackknife_mean_is_s_over_root_n(recs in arb_block()) {
            let jk = stderr_jackknife(&recs, &MetricKind::MeanRevenue).unwrap();
            let cf = stderr_mean(recs.iter().map(|r| r.revenue)).unwrap();
            prop_assert!((jk - cf).abs() <= 1e-12 * cf.max(f64::MIN_POSITIVE), "{jk} vs {cf}");
        }

        #[test]
        fn studentize_antisymmetric(theta_hat in -10.0f64..10.0, d in -5.0f64..5.0, sigma in 0.01f64..3.0) {
            let up = studentize(MetricEstimate { theta_hat, sigma }, theta_hat - d).unwrap();
            let down = studentize(MetricEstimate { theta_hat, sigma }, theta_hat + d).unwrap();
            prop_assert!((up + down).abs() < 1e-9);
        }
    }
}
