//! boat-match: Bayesian propensity score matching for observational studies
//! with small, non-randomised treatment groups.
//!
//! The crate covers the full pipeline:
//!
//! * [`ingest`] — per-trip telemetry CSV → per-unit covariates, max-min scaled
//! * [`model`] — Bayesian logistic regression of treatment assignment
//!   (likelihood, Gaussian priors, joint log-posterior, analytic gradient)
//! * [`sampler`] — No-U-Turn HMC sampler with dual-averaging step size
//! * [`vi`] — stochastic variational inference with a multivariate normal guide
//! * [`diagnostics`] — split-R̂, effective sample size, posterior summaries
//! * [`scoring`] — propensity scores from posterior draws
//! * [`matching`] — caliper and 1:1 nearest-neighbour matching, no replacement
//! * [`analysis`] — covariate balance and average treatment effects
//! * [`synth`] — synthetic confounded studies with known ground truth

pub mod analysis;
pub mod density;
pub mod diagnostics;
mod error;
pub mod ingest;
pub mod matching;
pub mod matrix;
pub mod model;
pub mod sampler;
pub mod scoring;
pub mod seed;
pub mod stats;
pub mod synth;
pub mod vi;

pub use error::{Error, Result};
