//! Robust distributed Bayesian inference for Gaussian-process functional
//! regression via random data sketching.
//!
//! The pipeline fits the Gaussian linear mixed model
//! `y_s = Z_s γ + X β + w_s + ε_s` on `H` random sketches of the data in
//! parallel, with the likelihood of each sketch raised to `n/m` so the
//! sketched posteriors have full-data-order spread. The `H` sketched
//! posteriors are then merged into a single collaborative posterior by
//! averaging their quantile functions (the one-dimensional Wasserstein
//! barycenter). Sketches of data distributed across private centers can be
//! assembled by summing per-center partial sketches without moving raw rows.
//!
//! Module map:
//! - [`data`]: dataset containers, validation, csv/bin file formats
//! - [`kernels`]: exponential kernel, full-GP / MPP / NNGP covariance operators
//! - [`sketch`]: Gaussian sketching matrices, partition baselines, sketched data
//! - [`federation`]: multi-center partial sketches and their aggregation
//! - [`sampler`]: per-sketch MCMC (Gibbs coefficients, MH variances)
//! - [`combine`]: quantile-averaged collaborative posterior
//! - [`predict`]: posterior predictive composition sampling
//! - [`metrics`]: MSPE, coverage, interval score, energy score, threshold error
//! - [`simgen`]: synthetic data generators for tests and benchmarks
//!
//! With the default `parallel` feature the coarse-grained loops (per-sketch
//! chains, predictive draws, per-coordinate summaries, covariance block
//! products) run on rayon; building with `--no-default-features` produces a
//! fully sequential library with identical outputs.

pub mod combine;
pub mod data;
pub mod error;
pub mod exec;
pub mod federation;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod predict;
pub mod rng;
pub mod sampler;
pub mod simgen;
pub mod sketch;

pub(crate) mod binfmt;

pub use error::{Error, Result};
