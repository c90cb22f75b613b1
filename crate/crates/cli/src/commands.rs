//! The subcommands. Each one computes everything in memory first and only
//! then writes its files, so a failed run leaves nothing behind.

use bootstrap_msprt::abtest::AbMonitor;
use bootstrap_msprt::baselines::{
    calibrate_maxsprt_threshold, chasing_significance_trials, default_threshold_grid, maxsprt_null_rejection_rate,
    MaxSprtConfig,
};
use bootstrap_msprt::bootstrap::{Bandwidth, BootstrapConfig};
use bootstrap_msprt::harness::synth::{generate_sessions, SyntheticConfig};
use bootstrap_msprt::harness::{
    block_size_sweep, calibrate_tau, empirical_cdf, power_points, qq_points, random_split, rejection_rate, run_aa_trials, run_trials,
    smallest_calibrated, BootstrapMsprtTest, MaxSprtTest, PowerPoint, TrialResult, SAMPLES_CONSUMED_CONVENTION,
};
use bootstrap_msprt::metrics::{chunk_blocks, compute_metric, MetricKind, SessionRecord, StdErrMethod};
use bootstrap_msprt::msprt::{DecisionTag, KdeEval, Prior};
use bootstrap_msprt::{seed, Exec};
use serde::Serialize;
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::io::{parse_csv, sessions_csv, table, Outputs};
use crate::options::{Command, InputSpec, Seeds, Settings, TauSpec};

/// Significance levels at which p-value CDFs are reported.
pub const CDF_LEVELS: [f64; 3] = [0.01, 0.05, 0.1];

/// Fraction of the reference metric used for `--tau auto`.
pub const AUTO_TAU_FRACTION: f64 = 0.03;

/// Prior scales tried by `--tau calibrate`, as fractions of the reference metric.
pub const TAU_GRID_FRACTIONS: [f64; 10] = [0.01, 0.02, 0.03, 0.05, 0.075, 0.1, 0.15, 0.2, 0.3, 0.5];

/// Config as it was actually used; echoed into `metadata.json`.
#[derive(Debug, Serialize)]
struct Resolved<'a> {
    metric: &'a str,
    stderr: StdErrMethod,
    block_size: usize,
    alpha: f64,
    tau: f64,
    tau_source: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    tau_calibration: Option<serde_json::Value>,
    prior_mean: f64,
    #[serde(rename = "B")]
    resamples: usize,
    #[serde(rename = "M")]
    prior_samples: usize,
    seeds: Seeds,
    input: &'a InputSpec,
    offsets: Vec<f64>,
    offset: f64,
    trials: usize,
    looks: usize,
    block_sizes: &'a [usize],
    calibration_trials: usize,
}

#[derive(Debug, Serialize)]
struct Metadata<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: Resolved<'a>,
    samples_consumed: &'static str,
    files: Vec<&'a str>,
    results: serde_json::Value,
}

struct Data {
    records: Vec<SessionRecord>,
    /// Explicit variation group for `test`.
    variation: Option<Vec<SessionRecord>>,
}

fn load(s: &Settings) -> CliResult<Data> {
    match &s.input {
        InputSpec::File { path, path_b } => {
            let records = parse_csv(path)?;
            let variation = path_b.as_deref().map(parse_csv).transpose()?;
            if records.is_empty() {
                return Err(CliError::Data(format!("{} has no records", path.display())));
            }
            Ok(Data { records, variation })
        }
        InputSpec::Synthetic { n_sessions, model } => {
            let records =
                generate_sessions(&SyntheticConfig { n_sessions: *n_sessions, model: model.clone(), rng_seed: s.seeds.data })?;
            Ok(Data { records, variation: None })
        }
    }
}

/// `|metric|` on the whole input.
fn reference_value(s: &Settings, data: &Data) -> CliResult<f64> {
    let all: Vec<SessionRecord> = data.records.iter().chain(data.variation.iter().flatten()).copied().collect();
    let reference = compute_metric(&all, &s.metric)?.abs();
    if reference > 0.0 && reference.is_finite() {
        Ok(reference)
    } else {
        Err(CliError::Data(format!("a data-derived tau needs a nonzero reference metric, got {reference}")))
    }
}

/// Resolved tau, the unit for `<k>tau` offsets and, for `calibrate`, the
/// calibration record. A calibrated tau keeps offsets on the `auto` scale so
/// effect sizes do not move with the calibration.
fn resolve_tau(s: &Settings, data: &Data) -> CliResult<(f64, f64, Option<serde_json::Value>)> {
    match s.tau {
        TauSpec::Value(v) => Ok((v, v, None)),
        TauSpec::Auto => {
            let tau = AUTO_TAU_FRACTION * reference_value(s, data)?;
            Ok((tau, tau, None))
        }
        TauSpec::Calibrate => {
            let reference = reference_value(s, data)?;
            let grid: Vec<f64> = TAU_GRID_FRACTIONS.iter().map(|f| f * reference).collect();
            let unit = AUTO_TAU_FRACTION * reference;
            let template = msprt_test(s, s.block_size, unit)?;
            let split_seed = seed::derive(s.seeds.split, u64::MAX);
            let cal = calibrate_tau(&data.records, &template, &grid, s.trials, split_seed, s.exec)?;
            let record = json!({ "split_seed": split_seed, "type1": cal.type1, "offset_unit": unit, "grid": cal.grid });
            Ok((cal.tau, unit, Some(record)))
        }
    }
}

fn bootstrap_config(s: &Settings, exec: Exec) -> BootstrapConfig {
    BootstrapConfig {
        resamples: s.resamples,
        bandwidth: Bandwidth::Silverman,
        stderr: s.stderr,
        rng_seed: s.seeds.bootstrap,
        exec,
    }
}

/// Trials run in parallel, so each trial's bootstrap runs sequentially.
fn msprt_test(s: &Settings, block_size: usize, tau: f64) -> CliResult<BootstrapMsprtTest> {
    let test = BootstrapMsprtTest {
        kind: s.metric.clone(),
        block_size,
        bootstrap: bootstrap_config(s, Exec::Sequential),
        prior: Prior::normal(s.prior_mean, tau, s.prior_samples, s.seeds.prior)?,
        alpha: s.alpha,
        eval: KdeEval::default(),
    };
    test.validate()?;
    Ok(test)
}

fn trials_csv(results: &[Vec<TrialResult>]) -> Vec<u8> {
    table(
        &["trial_id", "offset", "final_p", "rejected", "samples_consumed"],
        results.iter().flatten().map(|r| {
            vec![r.trial_id.to_string(), r.offset.to_string(), r.final_p.to_string(), r.rejected.to_string(), r.samples_consumed.to_string()]
        }),
    )
}

fn qq_csv(p_values: &[f64]) -> Vec<u8> {
    table(&["uniform_q", "empirical_q"], qq_points(p_values).into_iter().map(|(u, e)| vec![u.to_string(), e.to_string()]))
}

fn power_csv(points: &[PowerPoint]) -> Vec<u8> {
    table(
        &["offset", "rejection_rate", "n_trials"],
        points.iter().map(|p| vec![p.offset.to_string(), p.rejection_rate.to_string(), p.n_trials.to_string()]),
    )
}

fn duration_csv(points: &[PowerPoint]) -> Vec<u8> {
    table(&["offset", "avg_duration"], points.iter().map(|p| vec![p.offset.to_string(), p.avg_duration.to_string()]))
}

fn cdf_json(p_values: &[f64]) -> serde_json::Value {
    CDF_LEVELS.iter().map(|&a| (a.to_string(), json!(empirical_cdf(p_values, a)))).collect::<serde_json::Map<_, _>>().into()
}

fn cmd_test(s: &Settings, data: Data, tau: f64, unit: f64, out: &mut Outputs) -> CliResult<serde_json::Value> {
    let (a, b) = match data.variation {
        Some(b) => (data.records, b),
        None => random_split(&data.records, s.seeds.split),
    };
    let offset = s.offset.resolve(unit);
    let blocks_a = chunk_blocks(&a, s.block_size)?;
    let blocks_b = chunk_blocks(&b, s.block_size)?;
    if blocks_a.is_empty() || blocks_b.is_empty() {
        return Err(CliError::Data(format!(
            "need at least one full block of {} records per group, have {} and {}",
            s.block_size,
            a.len(),
            b.len()
        )));
    }
    let prior = Prior::normal(s.prior_mean, tau, s.prior_samples, s.seeds.prior)?;
    let mut monitor =
        AbMonitor::new(0.0, &prior, s.metric.clone(), bootstrap_config(s, s.exec), s.block_size, s.alpha)?.with_offset(offset);
    let mut lines = Vec::new();
    let mut pairs = 0;
    for (x, y) in blocks_a.iter().zip(&blocks_b) {
        pairs += 1;
        if let Some(rec) = monitor.observe(x, y)? {
            lines.extend(serde_json::to_vec(&rec).expect("record serializes"));
            lines.push(b'\n');
        }
        if monitor.decision().tag == DecisionTag::RejectNull {
            break;
        }
    }
    let decision = monitor.decision();
    let rejected = decision.tag == DecisionTag::RejectNull;
    out.add("trajectory.jsonl", lines);
    Ok(json!({
        "decision": decision.tag,
        "at_block": decision.at_block,
        "p_value": decision.p_value,
        "blocks_seen": monitor.state().blocks_seen(),
        "skipped_blocks": monitor.state().skipped_blocks(),
        "samples_consumed": if rejected { 2 * s.block_size * pairs } else { a.len() + b.len() },
        "group_sizes": [a.len(), b.len()],
    }))
}

fn cmd_aa(s: &Settings, data: Data, tau: f64, out: &mut Outputs) -> CliResult<serde_json::Value> {
    let test = msprt_test(s, s.block_size, tau)?;
    let results = run_aa_trials(&data.records, &test, s.trials, s.seeds.split, s.exec)?;
    let p: Vec<f64> = results.iter().map(|r| r.final_p).collect();
    let chasing = chasing_significance_trials(&data.records, &s.metric, s.looks, s.alpha, s.trials, s.seeds.split, s.exec)?;
    out.add("qq_points.csv", qq_csv(&p));
    out.add("trials.csv", trials_csv(std::slice::from_ref(&results)));
    out.add(
        "chasing.csv",
        table(
            &["trial_id", "min_p", "final_p", "ever_rejected"],
            chasing.iter().enumerate().map(|(t, c)| vec![t.to_string(), c.min_p.to_string(), c.final_p.to_string(), c.ever_rejected.to_string()]),
        ),
    );
    let n = chasing.len() as f64;
    Ok(json!({
        "rejection_rate": rejection_rate(&results),
        "p_value_cdf": cdf_json(&p),
        "z_test_repeated_looks_rejection_rate": chasing.iter().filter(|c| c.ever_rejected).count() as f64 / n,
        "z_test_single_look_rejection_rate": chasing.iter().filter(|c| c.final_p <= s.alpha).count() as f64 / n,
    }))
}

fn cmd_power(s: &Settings, data: Data, tau: f64, offsets: &[f64], out: &mut Outputs) -> CliResult<serde_json::Value> {
    let test = msprt_test(s, s.block_size, tau)?;
    let results = run_trials(&data.records, &test, offsets, s.trials, s.seeds.split, s.exec)?;
    let points = power_points(&results);
    out.add("power.csv", power_csv(&points));
    out.add("duration.csv", duration_csv(&points));
    out.add("trials.csv", trials_csv(&results));
    Ok(json!({ "points": points }))
}

fn cmd_blocksize(s: &Settings, data: Data, tau: f64, out: &mut Outputs) -> CliResult<serde_json::Value> {
    for &size in &s.block_sizes {
        msprt_test(s, size, tau)?;
    }
    let reports = block_size_sweep(
        &data.records,
        &s.block_sizes,
        |size| msprt_test(s, size, tau).expect("validated above"),
        &CDF_LEVELS,
        s.trials,
        s.seeds.split,
        s.exec,
    )?;
    out.add(
        "blocksize.csv",
        table(
            &["block_size", "alpha", "cdf", "calibrated"],
            reports.iter().flat_map(|r| {
                r.cdf.iter().map(move |(a, c)| vec![r.block_size.to_string(), a.to_string(), c.to_string(), r.calibrated.to_string()])
            }),
        ),
    );
    for r in &reports {
        out.add(
            format!("qq_points_{}.csv", r.block_size),
            table(&["uniform_q", "empirical_q"], r.qq_points.iter().map(|(u, e)| vec![u.to_string(), e.to_string()])),
        );
    }
    Ok(json!({
        "smallest_calibrated_block_size": smallest_calibrated(&reports),
        "rejection_rates": reports.iter().map(|r| json!({"block_size": r.block_size, "rejection_rate": r.rejection_rate})).collect::<Vec<_>>(),
    }))
}

fn cmd_synth(data: Data, out: &mut Outputs) -> serde_json::Value {
    out.add("sessions.csv", sessions_csv(&data.records));
    json!({ "rows": data.records.len() })
}

fn cmd_compare(s: &Settings, data: Data, tau: f64, offsets: &[f64], out: &mut Outputs) -> CliResult<serde_json::Value> {
    if !matches!(s.metric, MetricKind::QuerySuccessRate) {
        return Err(CliError::Config("`compare-maxsprt` compares success rates; use --metric qsr".into()));
    }
    let p0 = compute_metric(&data.records, &s.metric)?;
    let base = MaxSprtConfig { p0, threshold: 1.0, max_samples: data.records.len() / 2, block_size: s.block_size };
    let calibration_seed = seed::derive(s.seeds.bootstrap, u64::MAX);
    let grid = default_threshold_grid(64);
    let threshold = calibrate_maxsprt_threshold(&base, s.alpha, s.calibration_trials, calibration_seed, &grid, s.exec)?;
    let maxsprt = MaxSprtTest { cfg: MaxSprtConfig { threshold, ..base } };
    let null_rate = maxsprt_null_rejection_rate(&maxsprt.cfg, s.calibration_trials, calibration_seed, s.exec)?;

    let ms = power_points(&run_trials(&data.records, &maxsprt, offsets, s.trials, s.seeds.split, s.exec)?);
    let bs = power_points(&run_trials(&data.records, &msprt_test(s, s.block_size, tau)?, offsets, s.trials, s.seeds.split, s.exec)?);
    out.add("power_maxsprt.csv", power_csv(&ms));
    out.add("duration_maxsprt.csv", duration_csv(&ms));
    out.add("power_bootstrap.csv", power_csv(&bs));
    out.add("duration_bootstrap.csv", duration_csv(&bs));
    Ok(json!({
        "p0": p0,
        "maxsprt_threshold": threshold,
        "maxsprt_calibration_seed": calibration_seed,
        "maxsprt_null_rejection_rate": null_rate,
        "maxsprt_max_samples_per_arm": maxsprt.cfg.max_samples,
        "max_power_gap": ms.iter().zip(&bs).map(|(m, b)| (m.rejection_rate - b.rejection_rate).abs()).fold(0.0, f64::max),
    }))
}

/// Runs one command and writes its files. Returns a one-line summary.
pub fn execute(s: &Settings) -> CliResult<String> {
    let data = load(s)?;
    if data.variation.is_none() && data.records.len() < 2 && s.command != Command::Synth {
        return Err(CliError::Data("need at least two records".into()));
    }
    let (tau, unit, tau_calibration) = match s.command {
        Command::Synth => (None, 0.0, None),
        _ => {
            let (t, unit, cal) = resolve_tau(s, &data)?;
            (Some(t), unit, cal)
        }
    };
    let offsets: Vec<f64> = s.offsets.iter().map(|o| o.resolve(unit)).collect();
    let mut out = Outputs::default();
    let t = tau.unwrap_or(0.0);
    let results = match s.command {
        Command::Test => cmd_test(s, data, t, unit, &mut out)?,
        Command::Aa => cmd_aa(s, data, t, &mut out)?,
        Command::Power => cmd_power(s, data, t, &offsets, &mut out)?,
        Command::Blocksize => cmd_blocksize(s, data, t, &mut out)?,
        Command::Synth => cmd_synth(data, &mut out),
        Command::CompareMaxsprt => cmd_compare(s, data, t, &offsets, &mut out)?,
    };

    let uses_offsets = matches!(s.command, Command::Power | Command::CompareMaxsprt);
    let names: Vec<String> = out.names().map(String::from).collect();
    let meta = Metadata {
        tool: "bmsprt",
        version: env!("CARGO_PKG_VERSION"),
        command: s.command.name(),
        config: Resolved {
            metric: s.metric.name(),
            stderr: s.stderr,
            block_size: s.block_size,
            alpha: s.alpha,
            tau: t,
            tau_source: match s.tau {
                TauSpec::Auto => "auto",
                TauSpec::Calibrate => "calibrate",
                TauSpec::Value(_) => "given",
            },
            tau_calibration,
            prior_mean: s.prior_mean,
            resamples: s.resamples,
            prior_samples: s.prior_samples,
            seeds: s.seeds,
            input: &s.input,
            offsets: if uses_offsets { offsets } else { vec![] },
            offset: s.offset.resolve(unit),
            trials: s.trials,
            looks: s.looks,
            block_sizes: &s.block_sizes,
            calibration_trials: s.calibration_trials,
        },
        samples_consumed: SAMPLES_CONSUMED_CONVENTION,
        files: names.iter().map(String::as_str).collect(),
        results,
    };
    let mut bytes = serde_json::to_vec_pretty(&meta).expect("metadata serializes");
    bytes.push(b'\n');
    let summary = format!("{} done: {}", s.command.name(), serde_json::to_string(&meta.results).expect("json"));
    out.add("metadata.json", bytes);
    out.commit(&s.out)?;
    Ok(summary)
}
