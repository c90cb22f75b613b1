//! Flags, the optional config file and their resolution into a run config.
//!
//! The config file is TOML with flat `key = value` pairs named like the long
//! flags (`block-size = 2000`, `B = 500`, `seed-split = 7`). Flags win.

use std::path::{Path, PathBuf};

use bootstrap_msprt::harness::synth::SessionModel;
use bootstrap_msprt::metrics::{MetricKind, StdErrMethod};
use bootstrap_msprt::Exec;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "bmsprt", version, about = "Sequential A/B testing with the bootstrap mixture SPRT")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Options,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// One sequential A/B run; writes the JSON-lines trajectory.
    Test,
    /// Post A/A trials: p-value Q-Q points and the repeated-look z-test.
    Aa,
    /// Rejection rate and average duration over an offset grid.
    Power,
    /// Post A/A trials over several block sizes.
    Blocksize,
    /// Writes a synthetic session CSV.
    Synth,
    /// Calibrated MaxSPRT against the bootstrap test on Bernoulli data.
    CompareMaxsprt,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Test => "test",
            Command::Aa => "aa",
            Command::Power => "power",
            Command::Blocksize => "blocksize",
            Command::Synth => "synth",
            Command::CompareMaxsprt => "compare-maxsprt",
        }
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Options {
    /// Key-value config file; flags take precedence.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Append structured error records (JSON lines) to this file.
    #[arg(long, global = true)]
    pub error_log: Option<PathBuf>,

    /// `qsr` (query success rate) or `mean_revenue`.
    #[arg(long, global = true)]
    pub metric: Option<String>,
    /// `default` (delta method / sample sd) or `jackknife`.
    #[arg(long, global = true)]
    pub stderr: Option<String>,
    #[arg(long, global = true)]
    pub block_size: Option<usize>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Prior standard deviation; `auto` for 3% of the metric on the input,
    /// `calibrate` to choose it by `--trials` post A/A trials per candidate
    /// (default for compare-maxsprt).
    #[arg(long, global = true)]
    #[serde(default, deserialize_with = "number_or_string")]
    pub tau: Option<String>,
    #[arg(long, global = true)]
    pub prior_mean: Option<f64>,
    /// Bootstrap resamples per block.
    #[arg(long = "B", global = true)]
    #[serde(rename = "B")]
    pub resamples: Option<usize>,
    /// Prior Monte Carlo draws.
    #[arg(long = "M", global = true)]
    #[serde(rename = "M")]
    pub prior_samples: Option<usize>,

    #[arg(long, global = true)]
    pub seed_data: Option<u64>,
    #[arg(long, global = true)]
    pub seed_split: Option<u64>,
    #[arg(long, global = true)]
    pub seed_bootstrap: Option<u64>,
    #[arg(long, global = true)]
    pub seed_prior: Option<u64>,

    /// Session CSV. Without it, synthetic data is generated.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Variation group CSV for `test`; `--input` is then the control group.
    #[arg(long, global = true)]
    pub input_b: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Comma-separated offsets; `2tau` means twice the resolved tau (twice
    /// the `auto` tau when tau is calibrated).
    #[arg(long, global = true)]
    pub offsets: Option<String>,
    /// Offset added to the B − A difference in `test`.
    #[arg(long, global = true)]
    #[serde(default, deserialize_with = "number_or_string")]
    pub offset: Option<String>,
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Evenly spaced looks for the repeated-look z-test.
    #[arg(long, global = true)]
    pub looks: Option<usize>,
    /// Comma-separated block sizes for `blocksize`.
    #[arg(long, global = true)]
    pub block_sizes: Option<String>,
    /// Null trials for the MaxSPRT threshold calibration.
    #[arg(long, global = true)]
    pub calibration_trials: Option<usize>,

    /// Synthetic model: `correlated-queries`, `zero-inflated-revenue` or `bernoulli`.
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub n_sessions: Option<usize>,
    #[arg(long, global = true)]
    pub p: Option<f64>,
    #[arg(long, global = true)]
    pub mean_queries: Option<f64>,
    #[arg(long, global = true)]
    pub beta_a: Option<f64>,
    #[arg(long, global = true)]
    pub beta_b: Option<f64>,
    #[arg(long, global = true)]
    pub p_zero: Option<f64>,
    #[arg(long, global = true)]
    pub log_mean: Option<f64>,
    #[arg(long, global = true)]
    pub log_sd: Option<f64>,

    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    #[serde(default)]
    pub sequential: bool,
}

/// Config-file values such as `tau` may be written as a number or a string.
fn number_or_string<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum V {
        Int(i64),
        Float(f64),
        Str(String),
    }
    Ok(Some(match V::deserialize(d)? {
        V::Int(i) => i.to_string(),
        V::Float(f) => f.to_string(),
        V::Str(s) => s,
    }))
}

macro_rules! merge_fields {
    ($a:expr, $b:expr; $($f:ident),*) => { $( $a.$f = $a.$f.take().or($b.$f.take()); )* };
}

impl Options {
    /// Fills flags left unset from the config file named by `--config`.
    pub fn with_config_file(mut self) -> CliResult<Self> {
        let Some(path) = self.config.clone() else { return Ok(self) };
        let mut file = load_config_file(&path)?;
        merge_fields!(self, file; error_log, metric, stderr, block_size, alpha, tau, prior_mean, resamples,
            prior_samples, seed_data, seed_split, seed_bootstrap, seed_prior, input, input_b, out, offsets, offset,
            trials, looks, block_sizes, calibration_trials, model, n_sessions, p, mean_queries, beta_a, beta_b,
            p_zero, log_mean, log_sd);
        self.sequential |= file.sequential;
        Ok(self)
    }
}

pub fn load_config_file(path: &Path) -> CliResult<Options> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("config file {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("config file {}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Seeds {
    pub data: u64,
    pub split: u64,
    pub bootstrap: u64,
    pub prior: u64,
}

/// Where the records came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum InputSpec {
    File { path: PathBuf, path_b: Option<PathBuf> },
    Synthetic { n_sessions: usize, model: SessionModel },
}

/// A tau given as a number, or derived from the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauSpec {
    /// 3% of the metric on the input.
    Auto,
    /// Chosen by post A/A trials so that type-1 comes close to alpha.
    Calibrate,
    Value(f64),
}

/// An offset in absolute units or in multiples of tau.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OffsetSpec {
    Absolute(f64),
    Taus(f64),
}

impl OffsetSpec {
    pub fn resolve(self, tau: f64) -> f64 {
        match self {
            OffsetSpec::Absolute(v) => v,
            OffsetSpec::Taus(k) => k * tau,
        }
    }
}

/// Everything but the data-dependent parts, validated.
#[derive(Debug, Clone)]
pub struct Settings {
    pub command: Command,
    pub metric: MetricKind,
    pub stderr: StdErrMethod,
    pub block_size: usize,
    pub alpha: f64,
    pub tau: TauSpec,
    pub prior_mean: f64,
    pub resamples: usize,
    pub prior_samples: usize,
    pub seeds: Seeds,
    pub input: InputSpec,
    pub out: PathBuf,
    pub offsets: Vec<OffsetSpec>,
    pub offset: OffsetSpec,
    pub trials: usize,
    pub looks: usize,
    pub block_sizes: Vec<usize>,
    pub calibration_trials: usize,
    pub exec: Exec,
}

fn parse_offset(s: &str) -> CliResult<OffsetSpec> {
    let s = s.trim();
    let bad = || CliError::Config(format!("bad offset `{s}`: expected a number or `<k>tau`"));
    if let Some(k) = s.strip_suffix("tau") {
        let k = k.trim();
        let k = if k.is_empty() { 1.0 } else { k.parse::<f64>().map_err(|_| bad())? };
        return if k.is_finite() { Ok(OffsetSpec::Taus(k)) } else { Err(bad()) };
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite()).map(OffsetSpec::Absolute).ok_or_else(bad)
}

fn parse_list<T>(s: &str, what: &str, f: impl Fn(&str) -> CliResult<T>) -> CliResult<Vec<T>> {
    let items: Vec<T> = s.split(',').filter(|t| !t.trim().is_empty()).map(f).collect::<CliResult<_>>()?;
    if items.is_empty() {
        return Err(CliError::Config(format!("{what} must not be empty")));
    }
    Ok(items)
}

fn synthetic_model(o: &Options, command: Command) -> CliResult<SessionModel> {
    let default_model = if command == Command::CompareMaxsprt { "bernoulli" } else { "correlated-queries" };
    let model = match o.model.as_deref().unwrap_or(default_model) {
        "correlated-queries" => SessionModel::CorrelatedQueries {
            mean_queries: o.mean_queries.unwrap_or(3.0),
            success_beta: (o.beta_a.unwrap_or(2.0), o.beta_b.unwrap_or(8.0)),
        },
        "zero-inflated-revenue" => SessionModel::ZeroInflatedRevenue {
            p_zero: o.p_zero.unwrap_or(0.9),
            log_mean: o.log_mean.unwrap_or(1.0),
            log_sd: o.log_sd.unwrap_or(1.0),
        },
        "bernoulli" => SessionModel::Bernoulli { p: o.p.unwrap_or(0.05) },
        other => return Err(CliError::Config(format!("unknown model `{other}`"))),
    };
    model.validate()?;
    Ok(model)
}

impl Settings {
    pub fn resolve(command: Command, o: &Options) -> CliResult<Self> {
        let cfg = |m: String| Err(CliError::Config(m));
        let metric: MetricKind = o.metric.as_deref().unwrap_or("qsr").parse()?;
        let stderr = match o.stderr.as_deref().unwrap_or("default") {
            "default" => StdErrMethod::Default,
            "jackknife" => StdErrMethod::Jackknife,
            other => return cfg(format!("unknown stderr method `{other}`")),
        };
        let block_size = o.block_size.unwrap_or(1000);
        if block_size < 2 {
            return cfg(format!("block size must be at least 2, got {block_size}"));
        }
        let alpha = o.alpha.unwrap_or(0.05);
        if !(alpha > 0.0 && alpha < 1.0) {
            return cfg(format!("alpha must lie in (0, 1), got {alpha}"));
        }
        let default_tau = if command == Command::CompareMaxsprt { "calibrate" } else { "auto" };
        let tau = match o.tau.as_deref().unwrap_or(default_tau).trim() {
            "auto" => TauSpec::Auto,
            "calibrate" => TauSpec::Calibrate,
            t => match t.parse::<f64>() {
                Ok(v) if v > 0.0 && v.is_finite() => TauSpec::Value(v),
                _ => return cfg(format!("tau must be a positive number, `auto` or `calibrate`, got `{t}`")),
            },
        };
        let prior_mean = o.prior_mean.unwrap_or(0.0);
        if !prior_mean.is_finite() {
            return cfg("prior mean must be finite".into());
        }
        let resamples = o.resamples.unwrap_or(1000);
        if resamples < bootstrap_msprt::bootstrap::MIN_RESAMPLES {
            return cfg(format!("B must be at least {}, got {resamples}", bootstrap_msprt::bootstrap::MIN_RESAMPLES));
        }
        let prior_samples = o.prior_samples.unwrap_or(5000);
        if prior_samples < bootstrap_msprt::msprt::MIN_PRIOR_SAMPLES {
            return cfg(format!("M must be at least {}, got {prior_samples}", bootstrap_msprt::msprt::MIN_PRIOR_SAMPLES));
        }
        let seeds = Seeds {
            data: o.seed_data.unwrap_or(1),
            split: o.seed_split.unwrap_or(2),
            bootstrap: o.seed_bootstrap.unwrap_or(3),
            prior: o.seed_prior.unwrap_or(4),
        };
        let input = match &o.input {
            Some(path) => {
                if command == Command::Synth {
                    return cfg("`synth` generates data and takes no --input".into());
                }
                InputSpec::File { path: path.clone(), path_b: o.input_b.clone() }
            }
            None => {
                if o.input_b.is_some() {
                    return cfg("--input-b requires --input".into());
                }
                let default_n = if command == Command::CompareMaxsprt { 100_000 } else { 200_000 };
                let n_sessions = o.n_sessions.unwrap_or(default_n);
                if n_sessions == 0 {
                    return cfg("n-sessions must be positive".into());
                }
                InputSpec::Synthetic { n_sessions, model: synthetic_model(o, command)? }
            }
        };
        if o.input_b.is_some() && command != Command::Test {
            return cfg("--input-b is only used by `test`".into());
        }
        let Some(out) = o.out.clone() else { return cfg("--out is required".into()) };
        let offsets = match &o.offsets {
            Some(s) => parse_list(s, "offsets", parse_offset)?,
            None => (0..=5).map(|k| OffsetSpec::Taus(k as f64)).collect(),
        };
        let offset = match &o.offset {
            Some(s) => parse_offset(s)?,
            None => OffsetSpec::Absolute(0.0),
        };
        let trials = o.trials.unwrap_or(200);
        if trials == 0 {
            return cfg("trials must be positive".into());
        }
        let looks = o.looks.unwrap_or(15);
        if looks == 0 {
            return cfg("looks must be positive".into());
        }
        let block_sizes = match &o.block_sizes {
            Some(s) => parse_list(s, "block sizes", |t| {
                t.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&b| b >= 2)
                    .ok_or_else(|| CliError::Config(format!("bad block size `{t}`")))
            })?,
            None => vec![1000, 2000, 4000],
        };
        let calibration_trials = o.calibration_trials.unwrap_or(2000);
        if calibration_trials < 200 {
            return cfg(format!("calibration trials must be at least 200, got {calibration_trials}"));
        }
        Ok(Self {
            command,
            metric,
            stderr,
            block_size,
            alpha,
            tau,
            prior_mean,
            resamples,
            prior_samples,
            seeds,
            input,
            out,
            offsets,
            offset,
            trials,
            looks,
            block_sizes,
            calibration_trials,
            exec: if o.sequential { Exec::Sequential } else { Exec::Parallel },
        })
    }
}
