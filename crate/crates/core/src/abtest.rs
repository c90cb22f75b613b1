//! Two-sample (A/B) adaptation of the bootstrap mixture SPRT.
//!
//! Per block pair `k` the tested quantity is the difference
//! `θ̂_k = T(y_k) − T(x_k)` (variation minus control) with standard error
//! `sqrt(σ²(y_k) + σ²(x_k))`. Each bootstrap draw resamples both groups
//! independently and studentizes the recentered difference by the same
//! root-sum-square of the resamples' own standard errors.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::bootstrap::{self, BootstrapConfig, Resampler};
use crate::metrics::{self, Block, Blocker, MetricKind, SessionRecord};
use crate::msprt::{self, BlockSummary, Decision, DecisionTag, KdeEval, MsprtState, Prior, UpdateRecord};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct AbBlockPair {
    /// Group A, `x_k`.
    pub control: Block,
    /// Group B, `y_k`.
    pub variation: Block,
    /// Additive shift applied to the difference.
    pub offset: f64,
}

/// Block summary of a pair plus the per-group metric values.
#[derive(Debug, Clone)]
pub struct AbSummary {
    pub summary: BlockSummary,
    pub metric_a: f64,
    pub metric_b: f64,
    pub offset: f64,
}

/// Summary of a pair of equally sized record blocks, without offset.
/// Resample streams are keyed by `index`.
pub(crate) fn summarize_pair(
    index: usize,
    control: &[SessionRecord],
    variation: &[SessionRecord],
    kind: &MetricKind,
    cfg: &BootstrapConfig,
) -> Result<AbSummary> {
    if control.len() != variation.len() {
        return Err(Error::InvalidInput(format!(
            "paired blocks differ in size: {} vs {}",
            control.len(),
            variation.len()
        )));
    }
    cfg.validate()?;
    let est_a = metrics::estimate(control, kind, cfg.stderr)?;
    let est_b = metrics::estimate(variation, kind, cfg.stderr)?;
    if !(est_a.sigma > 0.0 && est_b.sigma > 0.0) {
        return Err(Error::DegenerateBlock(format!("block pair {index} has a zero standard error")));
    }
    let theta_hat = est_b.theta_hat - est_a.theta_hat;
    let sigma = est_a.sigma.hypot(est_b.sigma);

    let ra = Resampler::new(control, kind, cfg.stderr)?;
    let rb = Resampler::new(variation, kind, cfg.stderr)?;
    let samples = bootstrap::studentized_draws(cfg, cfg.block_seed(index), |rng| {
        let a = ra.draw(rng)?;
        let b = rb.draw(rng)?;
        Some((b.theta_hat - a.theta_hat - theta_hat) / a.sigma.hypot(b.sigma))
    })?;
    Ok(AbSummary {
        summary: BlockSummary {
            block_index: index,
            theta_hat,
            sigma,
            density: bootstrap::fit_kde(&samples, cfg.bandwidth)?,
        },
        metric_a: est_a.theta_hat,
        metric_b: est_b.theta_hat,
        offset: 0.0,
    })
}

/// Summary of one block pair. `theta_hat` includes the pair's offset; the
/// density does not depend on it.
pub fn ab_summary(pair: &AbBlockPair, kind: &MetricKind, cfg: &BootstrapConfig) -> Result<AbSummary> {
    let mut s = summarize_pair(pair.control.index(), pair.control.records(), pair.variation.records(), kind, cfg)?;
    s.summary.theta_hat += pair.offset;
    s.offset = pair.offset;
    Ok(s)
}

/// Per-update record of an A/B run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbUpdateRecord {
    #[serde(flatten)]
    pub update: UpdateRecord,
    pub metric_a: f64,
    pub metric_b: f64,
    pub offset: f64,
}

/// Which arm a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Control,
    Variation,
}

/// Streaming A/B monitor. Blocks of the two groups are paired by arrival
/// order and consumed in lockstep.
#[derive(Debug, Clone)]
pub struct AbMonitor {
    state: MsprtState,
    kind: MetricKind,
    cfg: BootstrapConfig,
    alpha: f64,
    offset: f64,
    blockers: [Blocker; 2],
    queued: [VecDeque<Block>; 2],
    next_index: usize,
}

impl AbMonitor {
    pub fn new(
        theta0: f64,
        prior: &Prior,
        kind: MetricKind,
        cfg: BootstrapConfig,
        block_size: usize,
        alpha: f64,
    ) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        cfg.validate()?;
        let state = msprt::init_state(theta0, prior)?.with_exec(cfg.exec);
        Ok(Self {
            state,
            kind,
            cfg,
            alpha,
            offset: 0.0,
            blockers: [Blocker::new(block_size)?, Blocker::new(block_size)?],
            queued: [VecDeque::new(), VecDeque::new()],
            next_index: 0,
        })
    }

    /// Adds `offset` to every block difference.
    pub fn with_offset(mut self, offset: f64) -> Self {
        self.offset = offset;
        self
    }

    pub fn with_eval(mut self, eval: KdeEval) -> Self {
        self.state = self.state.with_eval(eval);
        self
    }

    pub fn state(&self) -> &MsprtState {
        &self.state
    }

    pub fn decision(&self) -> Decision {
        self.state.decide(self.alpha)
    }

    /// Consumes one pair of blocks. Returns `None` when the pair is
    /// degenerate and was skipped.
    pub fn observe(&mut self, control: &Block, variation: &Block) -> Result<Option<AbUpdateRecord>> {
        let index = self.next_index;
        self.next_index += 1;
        match summarize_pair(index, control.records(), variation.records(), &self.kind, &self.cfg) {
            Ok(s) => {
                let step = self.state.update_shifted(&s.summary, self.offset)?;
                Ok(Some(AbUpdateRecord {
                    update: step.with_decision(self.alpha),
                    metric_a: s.metric_a,
                    metric_b: s.metric_b,
                    offset: self.offset,
                }))
            }
            Err(Error::DegenerateBlock(_)) => {
                self.state.skip(index)?;
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// Feeds one record; returns the records of any updates it completed.
    pub fn push(&mut self, group: Group, record: SessionRecord) -> Result<Vec<AbUpdateRecord>> {
        record.validate()?;
        let g = group as usize;
        if let Some(block) = self.blockers[g].push(record) {
            self.queued[g].push_back(block);
        }
        let mut out = Vec::new();
        while !self.queued[0].is_empty() && !self.queued[1].is_empty() {
            let a = self.queued[0].pop_front().expect("nonempty");
            let b = self.queued[1].pop_front().expect("nonempty");
            out.extend(self.observe(&a, &b)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct AbRun {
    pub decision: Decision,
    pub trajectory: Vec<AbUpdateRecord>,
}

impl AbRun {
    pub fn p_values(&self) -> Vec<f64> {
        self.trajectory.iter().map(|r| r.update.p_value).collect()
    }
}

/// Runs the sequential A/B test over paired block streams until the null is
/// rejected or either stream ends.
#[allow(clippy::too_many_arguments)]
pub fn run_ab_test<A, B>(
    stream_a: A,
    stream_b: B,
    theta0: f64,
    prior: &Prior,
    kind: &MetricKind,
    cfg: &BootstrapConfig,
    alpha: f64,
    offset: f64,
) -> Result<AbRun>
where
    A: IntoIterator<Item = Block>,
    B: IntoIterator<Item = Block>,
{
    let mut monitor = AbMonitor::new(theta0, prior, kind.clone(), cfg.clone(), 1, alpha)?.with_offset(offset);
    let mut trajectory = Vec::new();
    for (a, b) in stream_a.into_iter().zip(stream_b) {
        if let Some(rec) = monitor.observe(&a, &b)? {
            trajectory.push(rec);
        }
        if monitor.decision().tag == DecisionTag::RejectNull {
            break;
        }
    }
    Ok(AbRun { decision: monitor.decision(), trajectory })
}
