//! Statistical properties of the bootstrap density and the sequential test
//! that only show up with realistic sample sizes.

use bootstrap_msprt::abtest::{AbMonitor, Group};
use bootstrap_msprt::bootstrap::{bootstrap_studentized_samples, fit_kde, Bandwidth, BootstrapConfig};
use bootstrap_msprt::harness::synth::{generate_sessions, SessionModel, SyntheticConfig};
use bootstrap_msprt::metrics::{chunk_blocks, stderr_delta_ratio, stderr_jackknife, MetricKind, SessionRecord};
use bootstrap_msprt::msprt::{init_state, summarize, Prior};
use bootstrap_msprt::Exec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};

fn boot(resamples: usize, seed: u64) -> BootstrapConfig {
    BootstrapConfig { resamples, rng_seed: seed, exec: Exec::Sequential, ..BootstrapConfig::default() }
}

fn sessions(model: SessionModel, n: usize, seed: u64) -> Vec<SessionRecord> {
    generate_sessions(&SyntheticConfig { n_sessions: n, model, rng_seed: seed }).unwrap()
}

fn normal_revenues(n: usize, seed: u64) -> Vec<SessionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(20.0f64, 3.0).unwrap();
    (0..n).map(|i| SessionRecord::new(i as i64, 1, 1, d.sample(&mut rng).max(0.0)).unwrap()).collect()
}

/// Kolmogorov-Smirnov distance to the standard normal.
fn ks_to_normal(samples: &[f64]) -> f64 {
    let z = StdNormal::new(0.0, 1.0).unwrap();
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = z.cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn studentized_draws_are_near_normal_for_large_blocks() {
    let records = normal_revenues(1000, 1);
    let s = bootstrap_studentized_samples(&records, &MetricKind::MeanRevenue, &boot(2000, 2)).unwrap();
    let ks = ks_to_normal(&s);
    assert!(ks < 0.05, "KS distance {ks}");
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    assert!(mean.abs() < 0.1, "mean {mean}");
}

#[test]
fn kde_beats_normal_on_held_out_draws_for_skewed_blocks() {
    // Small block of heavy-tailed revenue: the studentized statistic is
    // visibly skewed, which the normal approximation cannot capture.
    let model = SessionModel::ZeroInflatedRevenue { p_zero: 0.8, log_mean: 1.0, log_sd: 1.5 };
    let records = sessions(model, 60, 3);
    let kind = MetricKind::MeanRevenue;
    let fit = bootstrap_studentized_samples(&records, &kind, &boot(2000, 4)).unwrap();
    let held_out = bootstrap_studentized_samples(&records, &kind, &boot(2000, 5)).unwrap();
    let kde = fit_kde(&fit, Bandwidth::Silverman).unwrap();
    let z = StdNormal::new(0.0, 1.0).unwrap();
    let n = held_out.len() as f64;
    let ll_kde = held_out.iter().map(|&x| kde.log_eval(x)).sum::<f64>() / n;
    let ll_normal = held_out.iter().map(|&x| z.ln_pdf(x)).sum::<f64>() / n;
    assert!(ll_kde > ll_normal, "kde {ll_kde} vs normal {ll_normal}");
}

#[test]
fn jackknife_agrees_with_delta_method_on_correlated_queries() {
    let model = SessionModel::CorrelatedQueries { mean_queries: 3.0, success_beta: (2.0, 8.0) };
    for seed in 0..3 {
        let records = sessions(model.clone(), 5000, 10 + seed);
        let delta = stderr_delta_ratio(&records).unwrap();
        let jack = stderr_jackknife(&records, &MetricKind::QuerySuccessRate).unwrap();
        assert!((jack / delta - 1.0).abs() < 0.10, "seed {seed}: jackknife {jack}, delta {delta}");
    }
}

#[test]
fn streaming_monitor_matches_block_updates() {
    let model = SessionModel::CorrelatedQueries { mean_queries: 3.0, success_beta: (2.0, 8.0) };
    let a = sessions(model.clone(), 2000, 20);
    let b = sessions(model, 2000, 21);
    let prior = Prior::normal(0.0, 0.01, 1000, 22).unwrap();
    let cfg = boot(200, 23);
    let kind = MetricKind::QuerySuccessRate;

    let mut by_block = AbMonitor::new(0.0, &prior, kind.clone(), cfg.clone(), 500, 0.05).unwrap();
    let blocks_a = chunk_blocks(&a, 500).unwrap();
    let blocks_b = chunk_blocks(&b, 500).unwrap();
    let expected: Vec<f64> =
        blocks_a.iter().zip(&blocks_b).filter_map(|(x, y)| by_block.observe(x, y).unwrap()).map(|r| r.update.log_l).collect();

    // Control records all arrive first; pairing must not depend on arrival.
    let mut streaming = AbMonitor::new(0.0, &prior, kind, cfg, 500, 0.05).unwrap();
    let mut got = Vec::new();
    for r in &a {
        got.extend(streaming.push(Group::Control, *r).unwrap());
    }
    assert!(got.is_empty());
    for r in &b {
        got.extend(streaming.push(Group::Variation, *r).unwrap());
    }
    let got: Vec<f64> = got.iter().map(|r| r.update.log_l).collect();
    assert_eq!(expected.len(), 4);
    assert_eq!(got, expected);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn p_values_stay_in_unit_interval_and_never_increase(
        seed in 0u64..1_000,
        tau in 0.05f64..2.0,
        shift in -1.0f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(10.0f64 + shift, 2.0).unwrap();
        let records: Vec<SessionRecord> =
            (0..400).map(|i| SessionRecord::new(i, 1, 1, d.sample(&mut rng).max(0.0)).unwrap()).collect();
        let prior = Prior::normal(10.0, tau, 1000, seed).unwrap();
        let mut state = init_state(10.0, &prior).unwrap();
        let mut last = 1.0;
        for block in chunk_blocks(&records, 100).unwrap() {
            let summary = summarize(&block, &MetricKind::MeanRevenue, &boot(100, seed)).unwrap();
            state.update(&summary).unwrap();
            let p = state.p_value();
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!(p <= last);
            last = p;
        }
    }
}
