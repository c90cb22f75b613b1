//! Post A/A evaluation: random splits, repeated sequential trials, Q-Q
//! points, power curves and test durations.
//!
//! Trial `t` uses split seed `derive(split_seed, t)` and the test's own
//! master seeds derived with the same counter, so results do not depend on
//! the order in which trials run.

pub mod synth;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::abtest::{summarize_pair, AbSummary};
use crate::baselines::{run_maxsprt, MaxSprtConfig};
use crate::bootstrap::BootstrapConfig;
use crate::exec::Exec;
use crate::metrics::{MetricKind, SessionRecord};
use crate::msprt::{KdeEval, MsprtState, Prior};
use crate::{seed, Error, Result};

/// How `samples_consumed` is counted; echoed into result metadata.
pub const SAMPLES_CONSUMED_CONVENTION: &str =
    "records of both groups up to and including the rejecting block pair; all records of the split when no rejection";

/// Group membership of each record: `true` for group B.
pub fn split_mask(n: usize, split_seed: u64) -> Vec<bool> {
    let mut rng = seed::rng(split_seed);
    (0..n).map(|_| rng.random::<bool>()).collect()
}

/// Assigns each record to A or B with probability 1/2. Both groups keep the
/// input order.
pub fn random_split(records: &[SessionRecord], split_seed: u64) -> (Vec<SessionRecord>, Vec<SessionRecord>) {
    let mask = split_mask(records.len(), split_seed);
    let mut a = Vec::with_capacity(records.len() / 2 + 1);
    let mut b = Vec::with_capacity(records.len() / 2 + 1);
    for (r, to_b) in records.iter().zip(mask) {
        if to_b { b.push(*r) } else { a.push(*r) }
    }
    (a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial_id: u64,
    pub final_p: f64,
    pub rejected: bool,
    pub samples_consumed: usize,
    pub offset: f64,
}

/// Outcome of one sequential run on one split at one offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOutcome {
    pub final_p: f64,
    pub rejected: bool,
    pub samples_consumed: usize,
}

/// A sequential two-sample test that can be driven by the harness.
pub trait SequentialTest: Sync {
    fn name(&self) -> &str;

    /// Runs the test on one A/A split once per offset, with the offset added
    /// to the B − A difference. Returns one outcome per offset.
    fn run_split(
        &self,
        group_a: &[SessionRecord],
        group_b: &[SessionRecord],
        offsets: &[f64],
        trial_id: u64,
    ) -> Result<Vec<TrialOutcome>>;
}

/// The bootstrap mixture SPRT with `θ0 = 0`.
#[derive(Debug, Clone)]
pub struct BootstrapMsprtTest {
    pub kind: MetricKind,
    pub block_size: usize,
    /// `rng_seed` is the master seed; trial `t` uses `derive(rng_seed, t)`.
    pub bootstrap: BootstrapConfig,
    /// `rng_seed` is the master seed; trial `t` uses `derive(rng_seed, t)`.
    pub prior: Prior,
    pub alpha: f64,
    pub eval: KdeEval,
}

impl BootstrapMsprtTest {
    pub fn validate(&self) -> Result<()> {
        if self.block_size < 2 {
            return Err(Error::InvalidConfig("block size must be at least 2".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        self.bootstrap.validate()?;
        self.prior.validate()
    }
}

impl BootstrapMsprtTest {
    /// Runs one split for every prior scale in `taus` and every offset.
    /// Result is indexed `[tau][offset]`. Bootstrap summaries depend on
    /// neither, so each block pair is summarized at most once.
    pub fn run_split_grid(
        &self,
        group_a: &[SessionRecord],
        group_b: &[SessionRecord],
        taus: &[f64],
        offsets: &[f64],
        trial_id: u64,
    ) -> Result<Vec<Vec<TrialOutcome>>> {
        self.validate()?;
        let n = self.block_size;
        let pairs = group_a.len().min(group_b.len()) / n;
        let boot = BootstrapConfig {
            rng_seed: seed::derive(self.bootstrap.rng_seed ^ seed::TAG_BOOT, trial_id),
            ..self.bootstrap.clone()
        };
        let prior_seed = seed::derive(self.prior.rng_seed ^ seed::TAG_PRIOR, trial_id);

        // Computed on first use: large offsets stop early.
        let mut cache: Vec<Option<Option<AbSummary>>> = vec![None; pairs];
        let mut grid = Vec::with_capacity(taus.len());
        for &tau in taus {
            let prior = Prior { tau, ..self.prior.reseeded(prior_seed) };
            prior.validate()?;
            let mixture = prior.draw();
            let mut outcomes = Vec::with_capacity(offsets.len());
            for &offset in offsets {
                let mut state =
                    MsprtState::with_mixture(0.0, mixture.clone())?.with_eval(self.eval).with_exec(self.bootstrap.exec);
                let mut consumed = None;
                for (k, slot) in cache.iter_mut().enumerate() {
                    if slot.is_none() {
                        let range = k * n..(k + 1) * n;
                        *slot = Some(match summarize_pair(k, &group_a[range.clone()], &group_b[range], &self.kind, &boot) {
                            Ok(s) => Some(s),
                            Err(Error::DegenerateBlock(_)) => None,
                            Err(e) => return Err(e),
                        });
                    }
                    match slot.as_ref().expect("filled above") {
                        Some(s) => {
                            state.update_shifted(&s.summary, offset)?;
                        }
                        None => state.skip(k)?,
                    }
                    if state.p_value() <= self.alpha {
                        consumed = Some(2 * n * (k + 1));
                        break;
                    }
                }
                outcomes.push(TrialOutcome {
                    final_p: state.p_value(),
                    rejected: consumed.is_some(),
                    samples_consumed: consumed.unwrap_or(group_a.len() + group_b.len()),
                });
            }
            grid.push(outcomes);
        }
        Ok(grid)
    }
}

impl SequentialTest for BootstrapMsprtTest {
    fn name(&self) -> &str {
        "bootstrap_msprt"
    }

    fn run_split(
        &self,
        group_a: &[SessionRecord],
        group_b: &[SessionRecord],
        offsets: &[f64],
        trial_id: u64,
    ) -> Result<Vec<TrialOutcome>> {
        Ok(self.run_split_grid(group_a, group_b, &[self.prior.tau], offsets, trial_id)?.remove(0))
    }
}

/// Block-monitored MaxSPRT. Reports `final_p` as 0 on rejection and 1
/// otherwise, since the test has no p-value of its own.
#[derive(Debug, Clone)]
pub struct MaxSprtTest {
    pub cfg: MaxSprtConfig,
}

impl SequentialTest for MaxSprtTest {
    fn name(&self) -> &str {
        "maxsprt"
    }

    fn run_split(
        &self,
        group_a: &[SessionRecord],
        group_b: &[SessionRecord],
        offsets: &[f64],
        _trial_id: u64,
    ) -> Result<Vec<TrialOutcome>> {
        offsets
            .iter()
            .map(|&offset| {
                let out = run_maxsprt(group_a, group_b, &self.cfg, offset)?;
                Ok(match out.rejected_at {
                    Some(k) => TrialOutcome { final_p: 0.0, rejected: true, samples_consumed: 2 * self.cfg.block_size * k },
                    None => TrialOutcome { final_p: 1.0, rejected: false, samples_consumed: group_a.len() + group_b.len() },
                })
            })
            .collect()
    }
}

/// Runs `n_trials` random A/A splits through `test` at every offset.
/// Result is indexed `[offset][trial]`.
pub fn run_trials<T: SequentialTest + ?Sized>(
    records: &[SessionRecord],
    test: &T,
    offsets: &[f64],
    n_trials: usize,
    split_seed: u64,
    exec: Exec,
) -> Result<Vec<Vec<TrialResult>>> {
    if n_trials == 0 {
        return Err(Error::InvalidConfig("need at least one trial".into()));
    }
    if offsets.is_empty() {
        return Err(Error::InvalidConfig("need at least one offset".into()));
    }
    if records.len() < 2 {
        return Err(Error::InvalidInput("need at least two records to split".into()));
    }
    let per_trial = exec.map(n_trials, 1, |t| {
        let (a, b) = random_split(records, seed::derive(split_seed, t as u64));
        test.run_split(&a, &b, offsets, t as u64)
    });
    let mut out = vec![Vec::with_capacity(n_trials); offsets.len()];
    for (t, outcomes) in per_trial.into_iter().enumerate() {
        for (i, o) in outcomes?.into_iter().enumerate() {
            out[i].push(TrialResult {
                trial_id: t as u64,
                final_p: o.final_p,
                rejected: o.rejected,
                samples_consumed: o.samples_consumed,
                offset: offsets[i],
            });
        }
    }
    Ok(out)
}

/// Post A/A trials with `θ0 = 0` and no offset.
pub fn run_aa_trials<T: SequentialTest + ?Sized>(
    records: &[SessionRecord],
    test: &T,
    n_trials: usize,
    split_seed: u64,
    exec: Exec,
) -> Result<Vec<TrialResult>> {
    Ok(run_trials(records, test, &[0.0], n_trials, split_seed, exec)?.remove(0))
}

/// Sorted p-values against plotting positions `(i − 0.5)/n`, as
/// `(uniform_quantile, empirical_quantile)`.
pub fn qq_points(p_values: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = p_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted.into_iter().enumerate().map(|(i, p)| ((i as f64 + 0.5) / n, p)).collect()
}

/// Fraction of p-values at or below `x`.
pub fn empirical_cdf(p_values: &[f64], x: f64) -> f64 {
    p_values.iter().filter(|&&p| p <= x).count() as f64 / p_values.len() as f64
}

pub fn rejection_rate(results: &[TrialResult]) -> f64 {
    results.iter().filter(|r| r.rejected).count() as f64 / results.len() as f64
}

/// Mean of `samples_consumed`.
pub fn avg_duration(results: &[TrialResult]) -> f64 {
    results.iter().map(|r| r.samples_consumed as f64).sum::<f64>() / results.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerPoint {
    pub offset: f64,
    pub rejection_rate: f64,
    pub n_trials: usize,
    pub avg_duration: f64,
}

pub fn power_points(results: &[Vec<TrialResult>]) -> Vec<PowerPoint> {
    results
        .iter()
        .map(|r| PowerPoint {
            offset: r[0].offset,
            rejection_rate: rejection_rate(r),
            n_trials: r.len(),
            avg_duration: avg_duration(r),
        })
        .collect()
}

/// Rejection rate and average duration per offset.
pub fn power_curve<T: SequentialTest + ?Sized>(
    records: &[SessionRecord],
    offsets: &[f64],
    test: &T,
    n_trials: usize,
    split_seed: u64,
    exec: Exec,
) -> Result<Vec<PowerPoint>> {
    Ok(power_points(&run_trials(records, test, offsets, n_trials, split_seed, exec)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSizeReport {
    pub block_size: usize,
    pub qq_points: Vec<(f64, f64)>,
    /// `(alpha, CDF(alpha))` pairs.
    pub cdf: Vec<(f64, f64)>,
    /// `CDF(alpha) <= alpha` at every tested level.
    pub calibrated: bool,
    pub rejection_rate: f64,
}

/// Runs post A/A trials at each block size, for choosing the smallest block
/// size whose p-values are not anti-conservative.
pub fn block_size_sweep<F, T>(
    records: &[SessionRecord],
    block_sizes: &[usize],
    make_test: F,
    alphas: &[f64],
    n_trials: usize,
    split_seed: u64,
    exec: Exec,
) -> Result<Vec<BlockSizeReport>>
where
    F: Fn(usize) -> T,
    T: SequentialTest,
{
    block_sizes
        .iter()
        .map(|&size| {
            let results = run_aa_trials(records, &make_test(size), n_trials, split_seed, exec)?;
            let p: Vec<f64> = results.iter().map(|r| r.final_p).collect();
            let cdf: Vec<(f64, f64)> = alphas.iter().map(|&a| (a, empirical_cdf(&p, a))).collect();
            Ok(BlockSizeReport {
                block_size: size,
                qq_points: qq_points(&p),
                calibrated: cdf.iter().all(|&(a, c)| c <= a),
                cdf,
                rejection_rate: rejection_rate(&results),
            })
        })
        .collect()
}

/// Smallest calibrated block size of a sweep.
pub fn smallest_calibrated(reports: &[BlockSizeReport]) -> Option<usize> {
    reports.iter().filter(|r| r.calibrated).map(|r| r.block_size).min()
}

/// Post A/A type-1 rate of the bootstrap test at each prior scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauCalibration {
    /// The chosen scale: largest type-1 rate not above `alpha`, ties going
    /// to the smaller scale.
    pub tau: f64,
    pub type1: f64,
    /// `(tau, type-1 rate)` over the whole grid.
    pub grid: Vec<(f64, f64)>,
}

/// Chooses the prior scale by post A/A trials, so that the realized type-1
/// rate comes as close to `test.alpha` as the grid allows without exceeding
/// it. `test.prior.tau` is ignored.
pub fn calibrate_tau(
    records: &[SessionRecord],
    test: &BootstrapMsprtTest,
    taus: &[f64],
    n_trials: usize,
    split_seed: u64,
    exec: Exec,
) -> Result<TauCalibration> {
    if taus.is_empty() || taus.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
        return Err(Error::InvalidConfig("tau grid must be nonempty and positive".into()));
    }
    if n_trials == 0 || records.len() < 2 {
        return Err(Error::InvalidConfig("tau calibration needs trials and at least two records".into()));
    }
    let per_trial = exec.map(n_trials, 1, |t| {
        let (a, b) = random_split(records, seed::derive(split_seed, t as u64));
        test.run_split_grid(&a, &b, taus, &[0.0], t as u64)
    });
    let mut rejections = vec![0usize; taus.len()];
    for outcomes in per_trial {
        for (i, o) in outcomes?.into_iter().enumerate() {
            rejections[i] += o[0].rejected as usize;
        }
    }
    let grid: Vec<(f64, f64)> = taus.iter().zip(&rejections).map(|(&t, &r)| (t, r as f64 / n_trials as f64)).collect();
    let mut best: Option<(f64, f64)> = None;
    for &(t, rate) in &grid {
        if rate <= test.alpha && best.is_none_or(|(bt, br)| rate > br || (rate == br && t < bt)) {
            best = Some((t, rate));
        }
    }
    let (tau, type1) = best.ok_or(Error::CalibrationFailed { alpha: test.alpha })?;
    Ok(TauCalibration { tau, type1, grid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{generate_sessions, SessionModel, SyntheticConfig};

    fn records(n: usize) -> Vec<SessionRecord> {
        generate_sessions(&SyntheticConfig {
            n_sessions: n,
            model: SessionModel::CorrelatedQueries { mean_queries: 3.0, success_beta: (2.0, 8.0) },
            rng_seed: 12,
        })
        .unwrap()
    }

    fn small_test() -> BootstrapMsprtTest {
        BootstrapMsprtTest {
            kind: MetricKind::QuerySuccessRate,
            block_size: 200,
            bootstrap: BootstrapConfig { resamples: 200, rng_seed: 3, exec: Exec::Sequential, ..Default::default() },
            prior: Prior::normal(0.0, 0.006, 1000, 4).unwrap(),
            alpha: 0.05,
            eval: KdeEval::default(),
        }
    }

    #[test]
    fn split_balance_and_partition() {
        let recs = records(100_000);
        let (a, b) = random_split(&recs, 5);
        let n = recs.len() as f64;
        assert!((a.len() as f64 - b.len() as f64).abs() <= 4.0 * (n / 4.0).sqrt());
        assert_eq!(a.len() + b.len(), recs.len());
        let mut merged: Vec<_> = a.iter().chain(&b).map(|r| r.timestamp).collect();
        merged.sort();
        assert_eq!(merged, recs.iter().map(|r| r.timestamp).collect::<Vec<_>>());
        assert!(a.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        assert!(b.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        assert_eq!(random_split(&recs, 5), (a, b));
    }

    #[test]
    fn qq_examples() {
        assert_eq!(qq_points(&[0.5]), vec![(0.5, 0.5)]);
        let grid: Vec<f64> = (0..10).map(|i| (i as f64 + 0.5) / 10.0).rev().collect();
        for (u, e) in qq_points(&grid) {
            assert!((u - e).abs() < 1e-15);
        }
        assert!(qq_points(&[1.0; 7]).iter().all(|&(u, e)| e == 1.0 && e > u));
    }

    #[test]
    fn duration_examples() {
        let mk = |c| TrialResult { trial_id: 0, final_p: 1.0, rejected: false, samples_consumed: c, offset: 0.0 };
        assert_eq!(avg_duration(&[mk(5000), mk(5000)]), 5000.0);
        assert_eq!(avg_duration(&[mk(1000), mk(3000)]), 2000.0);
    }

    #[test]
    fn single_trial_and_exhaustion() {
        let recs = records(2000);
        let t = small_test();
        let res = run_aa_trials(&recs, &t, 1, 9, Exec::Sequential).unwrap();
        assert_eq!(res.len(), 1);
        if !res[0].rejected {
            assert_eq!(res[0].samples_consumed, 2000);
        }
        assert!(res[0].samples_consumed <= 2000);
    }

    #[test]
    fn immediate_rejection_duration() {
        // A huge offset rejects at the first block pair in every trial.
        let recs = records(2000);
        let t = small_test();
        let res = run_trials(&recs, &t, &[1.0], 3, 9, Exec::Sequential).unwrap().remove(0);
        assert!(res.iter().all(|r| r.rejected && r.samples_consumed == 400));
        assert_eq!(avg_duration(&res), 400.0);
    }

    #[test]
    fn parallel_matches_sequential() {
        let recs = records(2000);
        let t = small_test();
        let seq = run_trials(&recs, &t, &[0.0, 0.01], 4, 2, Exec::Sequential).unwrap();
        let par = run_trials(&recs, &t, &[0.0, 0.01], 4, 2, Exec::Parallel).unwrap();
        assert_eq!(seq, par);
        let mut t2 = t.clone();
        t2.bootstrap.exec = Exec::Parallel;
        assert_eq!(run_trials(&recs, &t2, &[0.0, 0.01], 4, 2, Exec::Sequential).unwrap(), seq);
    }

    #[test]
    fn offsets_share_summaries_consistently() {
        // Running offsets together must equal running each alone.
        let recs = records(2000);
        let t = small_test();
        let both = run_trials(&recs, &t, &[0.0, 0.02], 2, 6, Exec::Sequential).unwrap();
        let alone = run_trials(&recs, &t, &[0.02], 2, 6, Exec::Sequential).unwrap();
        assert_eq!(both[1], alone[0]);
    }

    #[test]
    fn tau_grid_matches_single_runs() {
        let recs = records(2000);
        let t = small_test();
        let (a, b) = random_split(&recs, 3);
        let grid = t.run_split_grid(&a, &b, &[0.003, 0.02], &[0.0, 0.01], 4).unwrap();
        for (i, &tau) in [0.003, 0.02].iter().enumerate() {
            let single = BootstrapMsprtTest { prior: Prior { tau, ..t.prior.clone() }, ..t.clone() };
            assert_eq!(grid[i], single.run_split(&a, &b, &[0.0, 0.01], 4).unwrap());
        }
    }

    #[test]
    fn tau_calibration_picks_admissible_scale() {
        let recs = records(2000);
        let t = small_test();
        let cal = calibrate_tau(&recs, &t, &[0.001, 0.006, 0.03], 4, 8, Exec::Sequential).unwrap();
        assert_eq!(cal.grid.len(), 3);
        assert!(cal.type1 <= t.alpha);
        assert!(cal.grid.iter().all(|&(_, r)| r > t.alpha || r <= cal.type1));
        let strict = BootstrapMsprtTest { alpha: 1e-12, ..t };
        assert!(calibrate_tau(&recs, &strict, &[0.006], 2, 8, Exec::Sequential).is_ok());
        assert!(calibrate_tau(&recs, &strict, &[], 2, 8, Exec::Sequential).is_err());
    }

    #[test]
    fn sweep_flags_smallest() {
        let mk = |size: usize, cal: bool| BlockSizeReport {
            block_size: size,
            qq_points: vec![],
            cdf: vec![],
            calibrated: cal,
            rejection_rate: 0.0,
        };
        assert_eq!(smallest_calibrated(&[mk(1000, false), mk(2000, true), mk(4000, true)]), Some(2000));
        assert_eq!(smallest_calibrated(&[mk(1000, false)]), None);
    }

    #[test]
    fn maxsprt_test_durations() {
        let recs = generate_sessions(&SyntheticConfig { n_sessions: 20_000, model: SessionModel::Bernoulli { p: 0.05 }, rng_seed: 1 }).unwrap();
        let t = MaxSprtTest { cfg: MaxSprtConfig { p0: 0.05, threshold: 3.0, max_samples: 10_000, block_size: 1000 } };
        let res = run_trials(&recs, &t, &[0.0, 0.5], 2, 1, Exec::Sequential).unwrap();
        assert!(res[1].iter().all(|r| r.rejected && r.samples_consumed == 2000));
    }
}
