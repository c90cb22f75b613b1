//! Bootstrap mixture SPRT.
//!
//! A nonparametric sequential test for complex metrics. Incoming records are
//! cut into fixed-size blocks; each block yields a plug-in estimate, its
//! standard error and a bootstrap estimate of the density of the studentized
//! statistic. Those per-block likelihoods feed a mixture sequential
//! probability ratio test whose p-value stays valid under continuous
//! monitoring.
//!
//! Module map:
//!
//! - [`metrics`]: session records, blocks, metric functionals and standard errors.
//! - [`bootstrap`]: resampling, studentized bootstrap samples, Gaussian KDE.
//! - [`msprt`]: prior, log-likelihood accumulation, always-valid p-value.
//! - [`abtest`]: two-sample adaptation and the sequential A/B driver.
//! - [`baselines`]: z-test, repeated-look z-test, two-sample Bernoulli MaxSPRT.
//! - [`harness`]: synthetic data, post A/A trials, Q-Q points, power and duration.
//!
//! Data-parallel loops (bootstrap resamples, Monte Carlo trials, mixture terms)
//! run on rayon when the `parallel` feature is enabled and fall back to plain
//! iteration otherwise. Results are bit-identical either way.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod abtest;
pub mod baselines;
pub mod bootstrap;
mod error;
pub mod exec;
pub mod harness;
pub mod metrics;
pub mod msprt;
pub mod seed;

pub use error::{Error, Result};
pub use exec::Exec;
