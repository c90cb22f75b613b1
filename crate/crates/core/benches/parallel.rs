//! Sequential against parallel execution for the two hot paths: bootstrap
//! draws within a block and independent Monte Carlo trials.

use bootstrap_msprt::bootstrap::{bootstrap_studentized_samples, BootstrapConfig};
use bootstrap_msprt::harness::synth::{generate_sessions, SessionModel, SyntheticConfig};
use bootstrap_msprt::harness::{run_aa_trials, BootstrapMsprtTest};
use bootstrap_msprt::metrics::{MetricKind, SessionRecord};
use bootstrap_msprt::msprt::{KdeEval, Prior};
use bootstrap_msprt::Exec;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn sessions(n: usize) -> Vec<SessionRecord> {
    let model = SessionModel::CorrelatedQueries { mean_queries: 3.0, success_beta: (2.0, 8.0) };
    generate_sessions(&SyntheticConfig { n_sessions: n, model, rng_seed: 7 }).unwrap()
}

fn bootstrap_draws(c: &mut Criterion) {
    let records = sessions(1000);
    let mut group = c.benchmark_group("bootstrap_studentized_samples");
    for (name, exec) in MODES {
        let cfg = BootstrapConfig { resamples: 1000, rng_seed: 1, exec, ..BootstrapConfig::default() };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| bootstrap_studentized_samples(&records, &MetricKind::QuerySuccessRate, &cfg).unwrap())
        });
    }
    group.finish();
}

fn aa_trials(c: &mut Criterion) {
    let records = sessions(20_000);
    let test = BootstrapMsprtTest {
        kind: MetricKind::QuerySuccessRate,
        block_size: 1000,
        bootstrap: BootstrapConfig { resamples: 200, rng_seed: 2, exec: Exec::Sequential, ..BootstrapConfig::default() },
        prior: Prior::normal(0.0, 0.006, 1000, 3).unwrap(),
        alpha: 0.05,
        eval: KdeEval::default(),
    };
    let mut group = c.benchmark_group("run_aa_trials");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_aa_trials(&records, &test, 8, 4, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bootstrap_draws, aa_trials);
criterion_main!(benches);
