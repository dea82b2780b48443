//! Synthetic fleets with known confounding and a known treatment effect:
//! uniform [0,1] covariates (optionally correlated through a Gaussian
//! copula), logistic treatment assignment conditioned by rejection onto
//! exact group counts, and a linear outcome with additive Gaussian noise.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{FeatureMatrix, ScalingParams, UnitFeatureRow};
use crate::matrix::Matrix;
use crate::model::{sigmoid, ParamVector, Priors};
use crate::stats::normal_cdf;

const MAX_REJECTION_ROUNDS: usize = 1_000_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_control: usize,
    pub n_treated: usize,
    pub n_covariates: usize,
    /// Assignment model intercept and coefficients.
    pub true_alpha: f64,
    pub true_beta: Vec<f64>,
    /// Outcome model coefficients; overlap with `true_beta` is what makes
    /// covariates confounders.
    pub outcome_beta: Vec<f64>,
    /// Treatment effect in raw target units.
    pub tau: f64,
    pub noise_sd: f64,
    pub seed: u64,
    /// Exchangeable Gaussian-copula correlation between covariates.
    pub covariate_correlation: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        // the study dimensions of the motivating fleet (1100 control, 38
        // treated, 14 covariates) with moderate confounding on the first
        // four covariates
        let mut true_beta = vec![0.0; 14];
        true_beta[..4].copy_from_slice(&[2.0, -1.5, 1.0, 1.0]);
        let mut outcome_beta = vec![0.0; 14];
        outcome_beta[..4].copy_from_slice(&[1.0, -0.8, 0.5, 0.5]);
        Self {
            n_control: 1100,
            n_treated: 38,
            n_covariates: 14,
            true_alpha: -4.7,
            true_beta,
            outcome_beta,
            tau: -0.1,
            noise_sd: 0.05,
            seed: 42,
            covariate_correlation: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_control + self.n_treated < 2 {
            return Err(Error::InvalidConfig("need at least 2 units".into()));
        }
        if self.noise_sd < 0.0 {
            return Err(Error::InvalidConfig("noise_sd must be non-negative".into()));
        }
        if self.true_beta.len() != self.n_covariates
            || self.outcome_beta.len() != self.n_covariates
        {
            return Err(Error::InvalidConfig(format!(
                "coefficient vectors must have length {}",
                self.n_covariates
            )));
        }
        if let Some(rho) = self.covariate_correlation {
            if !(0.0..1.0).contains(&rho) {
                return Err(Error::InvalidConfig("correlation must lie in [0,1)".into()));
            }
        }
        Ok(())
    }
}

/// Ground truth of a generated study, persisted alongside it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub true_alpha: f64,
    pub true_beta: Vec<f64>,
    pub outcome_beta: Vec<f64>,
    /// Effect in raw target units.
    pub tau_raw: f64,
    /// Effect after target min-max scaling, the scale every report uses.
    pub tau_scaled: f64,
    pub noise_sd: f64,
    pub target_min: f64,
    pub target_max: f64,
    pub n_control: usize,
    pub n_treated: usize,
    pub seed: u64,
}

/// Draws regression parameters from their priors (variances, not sds).
pub fn draw_params<R: Rng>(priors: &Priors, n_covariates: usize, rng: &mut R) -> ParamVector {
    let z: f64 = rng.sample(StandardNormal);
    let alpha = z * priors.lambda_alpha.sqrt();
    let beta = (0..n_covariates)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * priors.lambda_beta.sqrt()
        })
        .collect();
    ParamVector { alpha, beta }
}

/// Bernoulli treatment labels under the logistic assignment model.
pub fn assign_labels<R: Rng>(params: &ParamVector, x: &Matrix, rng: &mut R) -> Vec<u8> {
    x.iter_rows()
        .map(|row| {
            let p = sigmoid(params.alpha + crate::stats::dot(&params.beta, row));
            u8::from(rng.random::<f64>() < p)
        })
        .collect()
}

/// The generative process of the assignment model: draw α and β from their
/// priors, then a Bernoulli label per row of `x`.
pub fn generate_from_prior<R: Rng>(
    priors: &Priors,
    x: &Matrix,
    rng: &mut R,
) -> (ParamVector, Vec<u8>) {
    let params = draw_params(priors, x.cols(), rng);
    let labels = assign_labels(&params, x, rng);
    (params, labels)
}

fn draw_covariates<R: Rng>(config: &SynthConfig, rng: &mut R) -> Matrix {
    let n = config.n_control + config.n_treated;
    let i = config.n_covariates;
    let mut m = Matrix::zeros(n, i);
    match config.covariate_correlation {
        None => {
            for r in 0..n {
                for c in 0..i {
                    m.set(r, c, rng.random::<f64>());
                }
            }
        }
        Some(rho) => {
            let shared_w = rho.sqrt();
            let own_w = (1.0 - rho).sqrt();
            for r in 0..n {
                let shared: f64 = rng.sample(StandardNormal);
                for c in 0..i {
                    let own: f64 = rng.sample(StandardNormal);
                    m.set(r, c, normal_cdf(shared_w * shared + own_w * own));
                }
            }
        }
    }
    m
}

/// Generates a full study: covariates, treatment labels hitting the exact
/// group counts by rejection, and a min-max scaled target with the scaled
/// effect recorded in the ground truth.
pub fn generate_study(config: &SynthConfig) -> Result<(FeatureMatrix, GroundTruth)> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let n = config.n_control + config.n_treated;
    let x = draw_covariates(config, &mut rng);
    let params = ParamVector { alpha: config.true_alpha, beta: config.true_beta.clone() };

    let probabilities: Vec<f64> = x
        .iter_rows()
        .map(|row| sigmoid(params.alpha + crate::stats::dot(&params.beta, row)))
        .collect();

    let mut labels = Vec::new();
    let mut hit = false;
    for _ in 0..MAX_REJECTION_ROUNDS {
        labels = probabilities.iter().map(|p| u8::from(rng.random::<f64>() < *p)).collect();
        let treated = labels.iter().filter(|l| **l == 1).count();
        if treated == config.n_treated {
            hit = true;
            break;
        }
    }
    if !hit {
        return Err(Error::CountsUnreachable { rounds: MAX_REJECTION_ROUNDS });
    }

    let raw_targets: Vec<f64> = x
        .iter_rows()
        .zip(&labels)
        .map(|(row, &y)| {
            let noise: f64 = rng.sample(StandardNormal);
            crate::stats::dot(&config.outcome_beta, row)
                + config.tau * f64::from(y)
                + config.noise_sd * noise
        })
        .collect();

    let t_min = raw_targets.iter().cloned().fold(f64::MAX, f64::min);
    let t_max = raw_targets.iter().cloned().fold(f64::MIN, f64::max);
    let degenerate = t_max == t_min;
    if degenerate {
        log::warn!("synthetic target is constant; scaled to 0.0 everywhere");
    }
    let scale = |v: f64| if degenerate { 0.0 } else { (v - t_min) / (t_max - t_min) };
    let tau_scaled = if degenerate { 0.0 } else { config.tau / (t_max - t_min) };

    let width = (n as f64).log10().ceil().max(1.0) as usize;
    let rows: Vec<UnitFeatureRow> = (0..n)
        .map(|r| UnitFeatureRow {
            unit_id: format!("unit-{:0width$}", r + 1),
            group: labels[r],
            target: scale(raw_targets[r]),
            covariates: x.row(r).to_vec(),
        })
        .collect();

    let matrix = FeatureMatrix {
        rows,
        scaling_params: Some(ScalingParams::identity(config.n_covariates, (t_min, t_max))),
        scaled: true,
    };
    let truth = GroundTruth {
        true_alpha: config.true_alpha,
        true_beta: config.true_beta.clone(),
        outcome_beta: config.outcome_beta.clone(),
        tau_raw: config.tau,
        tau_scaled,
        noise_sd: config.noise_sd,
        target_min: t_min,
        target_max: t_max,
        n_control: config.n_control,
        n_treated: config.n_treated,
        seed: config.seed,
    };
    Ok((matrix, truth))
}
