//! No-U-Turn sampler over any [`LogDensity`], configured the way the
//! propensity model is run: a single chain of 3000 draws after 200 warmup
//! iterations of dual-averaging step size adaptation.

mod nuts;
mod stepsize;

pub use nuts::{
    leapfrog, nuts_step, ChainState, LeapfrogStep, NutsOptions, StepStats,
    DIVERGENCE_THRESHOLD,
};
pub use stepsize::DualAveraging;

use std::io::{Read, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::density::LogDensity;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Dataset, PosteriorDensity, Priors};
use crate::seed::chain_seed;

use self::nuts::{find_reasonable_epsilon, nuts_step_with_mass, MassMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    Zeros,
    PriorDraw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectorySampling {
    Multinomial,
    Slice,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_samples: usize,
    pub n_warmup: usize,
    pub n_chains: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub seed: u64,
    pub init: InitStrategy,
    pub sampling: TrajectorySampling,
    /// Adapt a diagonal mass matrix from warmup variances instead of the
    /// identity metric.
    pub adapt_diag_mass: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_samples: 3000,
            n_warmup: 200,
            n_chains: 1,
            target_accept: 0.8,
            max_tree_depth: 10,
            seed: 42,
            init: InitStrategy::Zeros,
            sampling: TrajectorySampling::Multinomial,
            adapt_diag_mass: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be positive".into()));
        }
        if self.n_chains == 0 {
            return Err(Error::InvalidConfig("n_chains must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidConfig("target_accept must lie in (0,1)".into()));
        }
        Ok(())
    }

    fn options(&self) -> NutsOptions {
        NutsOptions {
            max_tree_depth: self.max_tree_depth,
            sampling: self.sampling,
            divergence_threshold: DIVERGENCE_THRESHOLD,
        }
    }
}

/// Post-warmup draws, rows grouped contiguously by chain. Column 0 is the
/// intercept when the target is the propensity model.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub draws: Matrix,
    pub chain_ids: Vec<u32>,
    pub divergence_count: usize,
    pub mean_accept: f64,
    /// Final adapted step size per chain.
    pub step_sizes: Vec<f64>,
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.draws.rows()
    }

    pub fn dim(&self) -> usize {
        self.draws.cols()
    }

    pub fn from_single_chain(draws: Matrix) -> Self {
        let n = draws.rows();
        Self {
            draws,
            chain_ids: vec![0; n],
            divergence_count: 0,
            mean_accept: f64::NAN,
            step_sizes: vec![],
        }
    }

    /// More than 10% divergent transitions make the run unreliable; the
    /// draws are still returned and the caller decides.
    pub fn unreliable(&self) -> bool {
        self.divergence_count * 10 > self.n_draws()
    }

    /// Splits the draws by chain, one series per chain for one dimension.
    pub fn chain_series(&self, dim: usize) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        let mut current_chain = None;
        for (row, &chain) in (0..self.n_draws()).zip(&self.chain_ids) {
            if current_chain != Some(chain) {
                out.push(Vec::new());
                current_chain = Some(chain);
            }
            out.last_mut().unwrap().push(self.draws.get(row, dim));
        }
        out
    }

    /// CSV schema: `chain,draw_index,alpha,beta_1..beta_I`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["chain".to_string(), "draw_index".to_string(), "alpha".to_string()];
        for i in 1..self.dim() {
            header.push(format!("beta_{i}"));
        }
        w.write_record(&header)?;
        let mut draw_index = 0usize;
        let mut last_chain = None;
        for row in 0..self.n_draws() {
            let chain = self.chain_ids[row];
            if last_chain != Some(chain) {
                draw_index = 0;
                last_chain = Some(chain);
            }
            let mut rec = vec![chain.to_string(), draw_index.to_string()];
            rec.extend(self.draws.row(row).iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
            draw_index += 1;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads draws back from CSV. Run statistics (divergences, acceptance,
    /// step sizes) live in the stats sidecar, not here.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut csv_reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = csv_reader.headers()?.clone();
        if headers.len() < 3 || headers.get(0) != Some("chain") || headers.get(2) != Some("alpha") {
            return Err(Error::MalformedDraws(
                "expected header chain,draw_index,alpha,beta_..".into(),
            ));
        }
        let dim = headers.len() - 2;
        let mut chain_ids = Vec::new();
        let mut data = Vec::new();
        for row in csv_reader.records() {
            let row = row?;
            if row.len() != headers.len() {
                return Err(Error::MalformedDraws("ragged row".into()));
            }
            let chain: u32 = row[0]
                .parse()
                .map_err(|_| Error::MalformedDraws(format!("bad chain id `{}`", &row[0])))?;
            chain_ids.push(chain);
            for j in 0..dim {
                let v: f64 = row[2 + j]
                    .parse()
                    .map_err(|_| Error::MalformedDraws(format!("bad value `{}`", &row[2 + j])))?;
                data.push(v);
            }
        }
        let n = chain_ids.len();
        Ok(Self {
            draws: Matrix::from_vec(data, n, dim),
            chain_ids,
            divergence_count: 0,
            mean_accept: f64::NAN,
            step_sizes: vec![],
        })
    }
}

struct ChainRun {
    draws: Vec<Vec<f64>>,
    divergences: usize,
    sum_accept: f64,
    step_size: f64,
}

fn run_chain<T: LogDensity>(
    target: &T,
    config: &SamplerConfig,
    initial_position: Vec<f64>,
    rng: &mut ChaCha12Rng,
) -> ChainRun {
    let options = config.options();
    let mut mass = MassMatrix::Identity;
    let mut state = ChainState::new(target, initial_position);
    let mut eps0 = find_reasonable_epsilon(target, &state, &mass, rng);
    let mut adapter = DualAveraging::new(eps0, config.target_accept);

    // optional diagonal metric estimated over the middle half of warmup
    let window = if config.adapt_diag_mass && config.n_warmup >= 40 {
        Some((config.n_warmup / 4, 3 * config.n_warmup / 4))
    } else {
        None
    };
    let dim = state.position.len();
    let mut wf_count = 0usize;
    let mut wf_mean = vec![0.0; dim];
    let mut wf_m2 = vec![0.0; dim];

    for m in 0..config.n_warmup {
        let stats = nuts_step_with_mass(&mut state, target, adapter.current(), &options, &mass, rng);
        adapter.advance(stats.accept_stat);
        if let Some((start, end)) = window {
            if m >= start && m < end {
                wf_count += 1;
                for i in 0..dim {
                    let delta = state.position[i] - wf_mean[i];
                    wf_mean[i] += delta / wf_count as f64;
                    wf_m2[i] += delta * (state.position[i] - wf_mean[i]);
                }
            }
            if m + 1 == end && wf_count >= 10 {
                let shrink = wf_count as f64 / (wf_count as f64 + 5.0);
                let variances: Vec<f64> = wf_m2
                    .iter()
                    .map(|m2| shrink * (m2 / (wf_count - 1) as f64) + (1.0 - shrink) * 1e-3)
                    .collect();
                mass = MassMatrix::diagonal(variances);
                eps0 = find_reasonable_epsilon(target, &state, &mass, rng);
                adapter = DualAveraging::new(eps0, config.target_accept);
            }
        }
    }

    let step_size = if config.n_warmup > 0 { adapter.adapted() } else { eps0 };
    let mut draws = Vec::with_capacity(config.n_samples);
    let mut divergences = 0usize;
    let mut sum_accept = 0.0;
    for _ in 0..config.n_samples {
        let stats = nuts_step_with_mass(&mut state, target, step_size, &options, &mass, rng);
        divergences += usize::from(stats.divergent);
        sum_accept += stats.accept_stat;
        draws.push(state.position.clone());
    }
    ChainRun { draws, divergences, sum_accept, step_size }
}

fn sample_with_init<T, F>(target: &T, config: &SamplerConfig, init: F) -> Result<PosteriorDraws>
where
    T: LogDensity + Sync,
    F: Fn(&mut ChaCha12Rng) -> Vec<f64> + Sync,
{
    config.validate()?;
    if config.n_warmup > 0 && config.n_warmup < 500 {
        log::warn!(
            "n_warmup = {} is short for dual averaging; step size may be rough",
            config.n_warmup
        );
    }

    let one_chain = |index: u32| {
        let mut rng = ChaCha12Rng::seed_from_u64(chain_seed(config.seed, index));
        let position = init(&mut rng);
        run_chain(target, config, position, &mut rng)
    };

    let runs: Vec<ChainRun> = if config.n_chains == 1 {
        vec![one_chain(0)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..config.n_chains as u32)
                .map(|i| scope.spawn(move || one_chain(i)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
        })
    };

    let dim = target.dim();
    let total = config.n_samples * config.n_chains;
    let mut data = Vec::with_capacity(total * dim);
    let mut chain_ids = Vec::with_capacity(total);
    let mut divergence_count = 0;
    let mut accept_total = 0.0;
    let mut step_sizes = Vec::with_capacity(config.n_chains);
    for (i, run) in runs.into_iter().enumerate() {
        divergence_count += run.divergences;
        accept_total += run.sum_accept;
        step_sizes.push(run.step_size);
        for draw in run.draws {
            data.extend_from_slice(&draw);
            chain_ids.push(i as u32);
        }
    }

    Ok(PosteriorDraws {
        draws: Matrix::from_vec(data, total, dim),
        chain_ids,
        divergence_count,
        mean_accept: accept_total / total as f64,
        step_sizes,
    })
}

/// Samples an arbitrary target (calibration runs, tests). `prior-draw`
/// initialisation means standard normal here.
pub fn sample_target<T: LogDensity + Sync>(
    target: &T,
    config: &SamplerConfig,
) -> Result<PosteriorDraws> {
    let dim = target.dim();
    sample_with_init(target, config, |rng| match config.init {
        InitStrategy::Zeros => vec![0.0; dim],
        InitStrategy::PriorDraw => (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    })
}

/// Draws from the joint posterior of the treatment-assignment regression.
pub fn sample_posterior(
    data: &Dataset,
    priors: &Priors,
    config: &SamplerConfig,
) -> Result<PosteriorDraws> {
    let target = PosteriorDensity::new(data, *priors);
    let dim = data.n_covariates() + 1;
    sample_with_init(&target, config, |rng| match config.init {
        InitStrategy::Zeros => vec![0.0; dim],
        InitStrategy::PriorDraw => {
            let mut v = Vec::with_capacity(dim);
            let z: f64 = rng.sample(StandardNormal);
            v.push(z * priors.lambda_alpha.sqrt());
            for _ in 1..dim {
                let z: f64 = rng.sample(StandardNormal);
                v.push(z * priors.lambda_beta.sqrt());
            }
            v
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::GaussianTarget;
    use crate::matrix::Matrix as M;
    use approx::assert_abs_diff_eq;

    fn logistic_dataset(n: usize, alpha: f64, beta: &[f64], seed: u64) -> Dataset {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let i = beta.len();
        let mut rows = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        loop {
            rows.clear();
            y.clear();
            for _ in 0..n {
                let x: Vec<f64> = (0..i).map(|_| rng.random_range(0.0..1.0)).collect();
                let p = crate::model::sigmoid(alpha + crate::stats::dot(beta, &x));
                y.push(u8::from(rng.random::<f64>() < p));
                rows.push(x);
            }
            if y.iter().any(|v| *v == 1) && y.iter().any(|v| *v == 0) {
                break;
            }
        }
        let ids = (0..n).map(|k| format!("u{k}")).collect();
        Dataset::new(M::from_rows(&rows), y, ids).unwrap()
    }

    #[test]
    fn same_seed_gives_identical_draws() {
        let data = logistic_dataset(60, -0.5, &[1.0, -0.6], 9);
        let config = SamplerConfig { n_samples: 40, n_warmup: 30, ..Default::default() };
        let a = sample_posterior(&data, &Priors::default(), &config).unwrap();
        let b = sample_posterior(&data, &Priors::default(), &config).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.divergence_count, b.divergence_count);
        assert_eq!(a.step_sizes, b.step_sizes);
    }

    #[test]
    fn draw_count_is_exact_and_chains_contiguous() {
        let target = GaussianTarget::standard(2);
        let config = SamplerConfig {
            n_samples: 25,
            n_warmup: 20,
            n_chains: 3,
            ..Default::default()
        };
        let draws = sample_target(&target, &config).unwrap();
        assert_eq!(draws.n_draws(), 75);
        assert_eq!(draws.chain_ids[..25], [0; 25]);
        assert_eq!(draws.chain_ids[25..50], [1; 25]);
        assert_eq!(draws.chain_ids[50..], [2; 25]);
        let series = draws.chain_series(0);
        assert_eq!(series.len(), 3);
        assert!(series.iter().all(|s| s.len() == 25));
    }

    #[test]
    fn posterior_matches_map_on_informative_data() {
        // strong data: posterior concentrates near the unique MAP
        let data = logistic_dataset(2000, -1.0, &[2.0], 4);
        let priors = Priors::default();
        let config = SamplerConfig { n_samples: 1500, n_warmup: 300, ..Default::default() };
        let draws = sample_posterior(&data, &priors, &config).unwrap();

        // independent gradient-ascent oracle on the log posterior
        let mut params = crate::model::ParamVector::zeros(1);
        for _ in 0..20000 {
            let g = crate::model::grad_log_posterior(&params, &data, &priors);
            params.alpha += 1e-3 * g[0];
            for (b, gi) in params.beta.iter_mut().zip(&g[1..]) {
                *b += 1e-3 * gi;
            }
        }
        for d in 0..2 {
            let col = draws.draws.column(d);
            let mean = crate::stats::mean(&col);
            let sd = crate::stats::sample_sd(&col);
            let map = params.to_vec()[d];
            assert!(
                (mean - map).abs() < 3.0 * sd,
                "dim {d}: posterior mean {mean}, MAP {map}, sd {sd}"
            );
        }
    }

    #[test]
    fn draws_csv_roundtrip() {
        let target = GaussianTarget::standard(3);
        let config = SamplerConfig { n_samples: 10, n_warmup: 5, n_chains: 2, ..Default::default() };
        let draws = sample_target(&target, &config).unwrap();
        let mut buf = Vec::new();
        draws.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("chain,draw_index,alpha,beta_1,beta_2"));
        let back = PosteriorDraws::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.draws, draws.draws);
        assert_eq!(back.chain_ids, draws.chain_ids);
    }

    #[test]
    fn rejects_single_class_before_sampling() {
        let m = M::from_rows(&[vec![0.1], vec![0.4]]);
        assert!(matches!(
            Dataset::new(m, vec![0, 0], vec!["a".into(), "b".into()]),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn diag_mass_adaptation_still_calibrated() {
        let target = GaussianTarget::new(vec![0.0, 0.0], vec![0.05, 5.0]);
        let config = SamplerConfig {
            n_samples: 2000,
            n_warmup: 400,
            adapt_diag_mass: true,
            seed: 3,
            ..Default::default()
        };
        let draws = sample_target(&target, &config).unwrap();
        for (d, sd) in [(0usize, 0.05f64), (1, 5.0)] {
            let col = draws.draws.column(d);
            let var = crate::stats::sample_variance(&col);
            assert!(
                (var / (sd * sd) - 1.0).abs() < 0.3,
                "dim {d}: var {var} vs {}",
                sd * sd
            );
        }
    }

    #[test]
    fn mean_accept_is_reported_near_target() {
        let target = GaussianTarget::standard(2);
        let config = SamplerConfig { n_samples: 500, n_warmup: 300, ..Default::default() };
        let draws = sample_target(&target, &config).unwrap();
        assert!(draws.mean_accept > 0.5 && draws.mean_accept <= 1.0);
        assert_eq!(draws.step_sizes.len(), 1);
        assert!(draws.step_sizes[0] > 0.0);
    }

    #[test]
    fn zero_warmup_is_allowed() {
        let target = GaussianTarget::standard(1);
        let config = SamplerConfig { n_samples: 50, n_warmup: 0, ..Default::default() };
        let draws = sample_target(&target, &config).unwrap();
        assert_eq!(draws.n_draws(), 50);
    }

    #[test]
    fn config_validation_errors() {
        let bad = SamplerConfig { n_samples: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SamplerConfig { target_accept: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn chained_normal_sample_mean_matches() {
        let target = GaussianTarget::standard(1);
        let config = SamplerConfig { seed: 123, ..Default::default() };
        let draws = sample_target(&target, &config).unwrap();
        let xs = draws.draws.column(0);
        assert_abs_diff_eq!(crate::stats::mean(&xs), 0.0, epsilon = 0.1);
        let var = crate::stats::sample_variance(&xs);
        assert!((0.85..=1.15).contains(&var), "variance {var}");
    }
}
