//! Bayesian logistic regression of treatment assignment: Bernoulli
//! likelihood through a sigmoid link, independent zero-mean Gaussian priors
//! on the intercept and coefficients, and the joint log-posterior (up to the
//! evidence constant) with its analytic gradient.

use serde::{Deserialize, Serialize};

use crate::density::LogDensity;
use crate::error::{Error, Result};
use crate::ingest::FeatureMatrix;
use crate::matrix::Matrix;

const LN_2PI: f64 = 1.8378770664093453;

/// Covariates and treatment indicator the regression is fit on.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<u8>,
    pub unit_ids: Vec<String>,
}

impl Dataset {
    /// Requires both classes present. A control group smaller than the
    /// treatment group is legal but logged as a warning.
    pub fn new(x: Matrix, y: Vec<u8>, unit_ids: Vec<String>) -> Result<Self> {
        assert_eq!(x.rows(), y.len(), "row count mismatch");
        assert_eq!(x.rows(), unit_ids.len(), "unit id count mismatch");
        assert!(y.iter().all(|v| *v <= 1), "treatment indicator must be 0/1");
        let n_treated = y.iter().filter(|v| **v == 1).count();
        let n_control = y.len() - n_treated;
        if n_treated == 0 || n_control == 0 {
            return Err(Error::SingleClass);
        }
        if n_control < n_treated {
            log::warn!(
                "control group ({n_control}) smaller than treatment group ({n_treated})"
            );
        }
        Ok(Self { x, y, unit_ids })
    }

    /// Builds the regression dataset from a scaled feature matrix.
    pub fn from_features(features: &FeatureMatrix) -> Result<Self> {
        if !features.is_scaled() {
            return Err(Error::Unscaled { op: "model fitting" });
        }
        let x = Matrix::from_rows(
            &features.rows.iter().map(|r| r.covariates.clone()).collect::<Vec<_>>(),
        );
        let y = features.rows.iter().map(|r| r.group).collect();
        let ids = features.rows.iter().map(|r| r.unit_id.clone()).collect();
        Self::new(x, y, ids)
    }

    pub fn n_units(&self) -> usize {
        self.y.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.cols()
    }
}

/// Prior variances for the intercept and the coefficients.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Priors {
    pub lambda_alpha: f64,
    pub lambda_beta: f64,
}

impl Priors {
    pub fn new(lambda_alpha: f64, lambda_beta: f64) -> Result<Self> {
        if lambda_alpha <= 0.0 || lambda_beta <= 0.0 {
            return Err(Error::InvalidConfig(
                "prior variances must be strictly positive".into(),
            ));
        }
        Ok(Self { lambda_alpha, lambda_beta })
    }
}

impl Default for Priors {
    fn default() -> Self {
        Self { lambda_alpha: 1.0, lambda_beta: 1.0 }
    }
}

/// Regression parameters: intercept `alpha` plus one coefficient per
/// covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub alpha: f64,
    pub beta: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(n_covariates: usize) -> Self {
        Self { alpha: 0.0, beta: vec![0.0; n_covariates] }
    }

    /// Packs as `[alpha, beta_1, .., beta_I]`, the layout used by the
    /// samplers and the draws file.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + self.beta.len());
        v.push(self.alpha);
        v.extend_from_slice(&self.beta);
        v
    }

    pub fn from_slice(packed: &[f64]) -> Self {
        assert!(!packed.is_empty());
        Self { alpha: packed[0], beta: packed[1..].to_vec() }
    }

    pub fn dim(&self) -> usize {
        1 + self.beta.len()
    }
}

/// Numerically stable logistic function; exact down to the smallest
/// positive subnormal, no overflow anywhere on the f64 range.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^t) without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// log sigmoid(t), safe in both tails (never -inf for finite t).
pub fn log_sigmoid(t: f64) -> f64 {
    -softplus(-t)
}

/// Sum of Gaussian log densities ln N(θ | 0, λ) over the intercept and every
/// coefficient, normalisation constants included.
pub fn log_prior(params: &ParamVector, priors: &Priors) -> f64 {
    let gauss = |theta: f64, lambda: f64| {
        -0.5 * (LN_2PI + lambda.ln()) - theta * theta / (2.0 * lambda)
    };
    let mut lp = gauss(params.alpha, priors.lambda_alpha);
    for &b in &params.beta {
        lp += gauss(b, priors.lambda_beta);
    }
    lp
}

/// Propensity score sigmoid(α + β·x) for one unit, clamped to the open
/// interval (0,1): scores are probabilities downstream code divides by and
/// takes logs of, so the saturated endpoints are excluded.
pub fn propensity(params: &ParamVector, x: &[f64]) -> f64 {
    debug_assert_eq!(params.beta.len(), x.len());
    sigmoid(params.alpha + crate::stats::dot(&params.beta, x))
        .clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Joint log-posterior (log prior + Bernoulli log-likelihood), up to the
/// evidence constant. The likelihood term is y·t − softplus(t) per unit,
/// which never underflows for the logit magnitudes the scaled data produce.
pub fn log_posterior(params: &ParamVector, data: &Dataset, priors: &Priors) -> f64 {
    let mut ll = 0.0;
    for (row, &y) in data.x.iter_rows().zip(&data.y) {
        let t = params.alpha + crate::stats::dot(&params.beta, row);
        ll += f64::from(y) * t - softplus(t);
    }
    log_prior(params, priors) + ll
}

/// Analytic gradient of [`log_posterior`], packed `[∂α, ∂β_1, ..]`:
/// ∂α = Σ(y − p) − α/λ_α and ∂β_i = Σ(y − p)·x_i − β_i/λ_β.
pub fn grad_log_posterior(params: &ParamVector, data: &Dataset, priors: &Priors) -> Vec<f64> {
    let mut grad = vec![0.0; params.dim()];
    for (row, &y) in data.x.iter_rows().zip(&data.y) {
        let t = params.alpha + crate::stats::dot(&params.beta, row);
        let r = f64::from(y) - sigmoid(t);
        grad[0] += r;
        for (g, &x) in grad[1..].iter_mut().zip(row) {
            *g += r * x;
        }
    }
    grad[0] -= params.alpha / priors.lambda_alpha;
    for (g, &b) in grad[1..].iter_mut().zip(&params.beta) {
        *g -= b / priors.lambda_beta;
    }
    grad
}

/// The posterior as a sampling target over `[alpha, beta..]`, evaluating
/// value and gradient in one pass over the data.
pub struct PosteriorDensity<'a> {
    data: &'a Dataset,
    priors: Priors,
}

impl<'a> PosteriorDensity<'a> {
    pub fn new(data: &'a Dataset, priors: Priors) -> Self {
        Self { data, priors }
    }
}

impl LogDensity for PosteriorDensity<'_> {
    fn dim(&self) -> usize {
        self.data.n_covariates() + 1
    }

    fn logp_and_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        debug_assert_eq!(position.len(), self.dim());
        let alpha = position[0];
        let beta = &position[1..];
        grad.fill(0.0);
        let mut logp = 0.0;
        for (row, &y) in self.data.x.iter_rows().zip(&self.data.y) {
            let t = alpha + crate::stats::dot(beta, row);
            let y = f64::from(y);
            logp += y * t - softplus(t);
            let r = y - sigmoid(t);
            grad[0] += r;
            for (g, &x) in grad[1..].iter_mut().zip(row) {
                *g += r * x;
            }
        }
        logp += -0.5 * (LN_2PI + self.priors.lambda_alpha.ln())
            - alpha * alpha / (2.0 * self.priors.lambda_alpha);
        grad[0] -= alpha / self.priors.lambda_alpha;
        for (i, &b) in beta.iter().enumerate() {
            logp += -0.5 * (LN_2PI + self.priors.lambda_beta.ln())
                - b * b / (2.0 * self.priors.lambda_beta);
            grad[i + 1] -= b / self.priors.lambda_beta;
        }
        logp
    }
}
