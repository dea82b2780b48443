//! Stochastic variational inference: a multivariate normal guide with a
//! full lower-triangular scale factor (mean-field as a fallback flag),
//! reparameterised ELBO gradients and Adam updates.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::density::LogDensity;
use crate::error::{Error, Result};
use crate::model::{Dataset, PosteriorDensity, Priors};

/// Contribution assigned to a sample whose log density is non-finite.
const CLAMP_LOGP: f64 = -1e12;

/// Multivariate normal guide N(mean, L·Lᵀ). The diagonal of L is kept in
/// log space so it stays positive under unconstrained updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Guide {
    pub mean: Vec<f64>,
    log_diag: Vec<f64>,
    /// Strict lower triangle, row-major: (i,j) with i > j at i(i-1)/2 + j.
    lower: Vec<f64>,
}

fn tri_index(i: usize, j: usize) -> usize {
    debug_assert!(i > j);
    i * (i - 1) / 2 + j
}

impl Guide {
    /// Initial guide: zero mean, scale factor 0.1·I.
    pub fn init(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_diag: vec![0.1f64.ln(); dim],
            lower: vec![0.0; dim * (dim - 1) / 2],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Entry L[i][j] of the scale factor.
    pub fn scale_entry(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => self.log_diag[i].exp(),
            std::cmp::Ordering::Greater => self.lower[tri_index(i, j)],
            std::cmp::Ordering::Less => 0.0,
        }
    }

    /// θ = mean + L·ε.
    pub fn transform(&self, eps: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut theta = self.mean.clone();
        for i in 0..d {
            for j in 0..=i {
                theta[i] += self.scale_entry(i, j) * eps[j];
            }
        }
        theta
    }

    /// Marginal standard deviation of coordinate `i`: ‖row i of L‖.
    pub fn sd(&self, i: usize) -> f64 {
        (0..=i).map(|j| self.scale_entry(i, j).powi(2)).sum::<f64>().sqrt()
    }

    /// Differential entropy of the guide: D/2·ln(2πe) + Σ ln L_ii.
    pub fn entropy(&self) -> f64 {
        let d = self.dim() as f64;
        0.5 * d * ((2.0 * std::f64::consts::PI).ln() + 1.0) + self.log_diag.iter().sum::<f64>()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.transform(&eps)
    }

    /// Flattened lower-triangular factor (diagonal included, row-major),
    /// the layout persisted in guide.json.
    pub fn export(&self) -> GuideExport {
        let d = self.dim();
        let mut flat = Vec::with_capacity(d * (d + 1) / 2);
        for i in 0..d {
            for j in 0..=i {
                flat.push(self.scale_entry(i, j));
            }
        }
        GuideExport { mean: self.mean.clone(), scale_factor: flat }
    }

    pub fn from_export(export: &GuideExport) -> Result<Self> {
        let d = export.mean.len();
        if export.scale_factor.len() != d * (d + 1) / 2 {
            return Err(Error::InvalidConfig(format!(
                "scale factor length {} does not match dimension {d}",
                export.scale_factor.len()
            )));
        }
        let mut log_diag = Vec::with_capacity(d);
        let mut lower = vec![0.0; d * (d - 1) / 2];
        let mut k = 0;
        for i in 0..d {
            for j in 0..=i {
                let v = export.scale_factor[k];
                k += 1;
                if i == j {
                    if v <= 0.0 {
                        return Err(Error::InvalidConfig(
                            "scale factor diagonal must be positive".into(),
                        ));
                    }
                    log_diag.push(v.ln());
                } else {
                    lower[tri_index(i, j)] = v;
                }
            }
        }
        Ok(Self { mean: export.mean.clone(), log_diag, lower })
    }
}

/// Serialisable form of the guide.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuideExport {
    pub mean: Vec<f64>,
    pub scale_factor: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VIConfig {
    pub n_steps: usize,
    /// Monte-Carlo samples per ELBO/gradient estimate.
    pub n_mc: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Full lower-triangular scale factor; false freezes the off-diagonal
    /// (mean-field) for speed.
    pub full_covariance: bool,
}

impl Default for VIConfig {
    fn default() -> Self {
        Self { n_steps: 40_000, n_mc: 8, learning_rate: 0.01, seed: 42, full_covariance: true }
    }
}

impl VIConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mc == 0 {
            return Err(Error::InvalidConfig("n_mc must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Monte-Carlo ELBO estimate.
#[derive(Debug, Clone, Copy)]
pub struct Elbo {
    pub value: f64,
    /// Samples whose log density was non-finite and got clamped.
    pub clamped: usize,
}

/// E_q[log p̃] + H(q) by reparameterised sampling.
pub fn elbo_estimate<T: LogDensity, R: Rng>(
    guide: &Guide,
    target: &T,
    n_mc: usize,
    rng: &mut R,
) -> Elbo {
    assert!(n_mc > 0);
    let mut acc = 0.0;
    let mut clamped = 0;
    for _ in 0..n_mc {
        let theta = guide.sample(rng);
        let lp = target.logp(&theta);
        if lp.is_finite() {
            acc += lp;
        } else {
            acc += CLAMP_LOGP;
            clamped += 1;
        }
    }
    if clamped > 0 {
        log::warn!("elbo estimate clamped {clamped}/{n_mc} non-finite samples");
    }
    Elbo { value: acc / n_mc as f64 + guide.entropy(), clamped }
}

#[derive(Debug, Clone)]
pub struct ViFit {
    pub guide: Guide,
    /// Negative ELBO estimate per optimisation step.
    pub loss_trace: Vec<f64>,
    pub clamped_samples: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    lr: f64,
}

impl Adam {
    fn new(len: usize, lr: f64) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0, lr }
    }

    /// Ascent step along `grad`.
    fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t as i32);
        let c2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] += self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
    }
}

/// Maximises the ELBO for an arbitrary target by stochastic gradient ascent
/// with reparameterised gradients.
pub fn fit_target<T: LogDensity>(target: &T, config: &VIConfig) -> Result<ViFit> {
    config.validate()?;
    let d = target.dim();
    let mut guide = Guide::init(d);
    let n_lower = guide.lower.len();
    let mut adam = Adam::new(2 * d + n_lower, config.learning_rate);
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);

    let mut loss_trace = Vec::with_capacity(config.n_steps);
    let mut clamped_total = 0usize;
    let mut grad = vec![0.0; 2 * d + n_lower];
    let mut point_grad = vec![0.0; d];
    let mut eps = vec![0.0; d];

    for step in 0..config.n_steps {
        grad.fill(0.0);
        let mut elbo_acc = 0.0;
        for _ in 0..config.n_mc {
            for e in eps.iter_mut() {
                *e = rng.sample(StandardNormal);
            }
            let theta = guide.transform(&eps);
            let lp = target.logp_and_grad(&theta, &mut point_grad);
            let ok = lp.is_finite() && point_grad.iter().all(|g| g.is_finite());
            if !ok {
                clamped_total += 1;
                elbo_acc += CLAMP_LOGP;
                continue;
            }
            elbo_acc += lp;
            for i in 0..d {
                grad[i] += point_grad[i];
                grad[d + i] += point_grad[i] * eps[i];
                if config.full_covariance {
                    for j in 0..i {
                        grad[2 * d + tri_index(i, j)] += point_grad[i] * eps[j];
                    }
                }
            }
        }
        let inv = 1.0 / config.n_mc as f64;
        for g in grad.iter_mut() {
            *g *= inv;
        }
        // chain rule through L_ii = exp(log_diag) plus the entropy gradient
        for i in 0..d {
            grad[d + i] = grad[d + i] * guide.log_diag[i].exp() + 1.0;
        }

        let loss = -(elbo_acc * inv + guide.entropy());
        if !loss.is_finite() {
            return Err(Error::ViDiverged { step });
        }
        loss_trace.push(loss);

        let mut params: Vec<f64> = Vec::with_capacity(2 * d + n_lower);
        params.extend_from_slice(&guide.mean);
        params.extend_from_slice(&guide.log_diag);
        params.extend_from_slice(&guide.lower);
        adam.update(&mut params, &grad);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::ViDiverged { step });
        }
        guide.mean.copy_from_slice(&params[..d]);
        guide.log_diag.copy_from_slice(&params[d..2 * d]);
        guide.lower.copy_from_slice(&params[2 * d..]);
    }

    Ok(ViFit { guide, loss_trace, clamped_samples: clamped_total })
}

/// Variational triangulation of the propensity model posterior.
pub fn fit_vi(data: &Dataset, priors: &Priors, config: &VIConfig) -> Result<ViFit> {
    let target = PosteriorDensity::new(data, *priors);
    fit_target(&target, config)
}
