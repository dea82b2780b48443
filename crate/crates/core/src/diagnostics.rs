//! Convergence and mixing diagnostics: split-R̂ (classic Brooks–Gelman–Rubin
//! over chain halves, with an optional rank-normalised variant), effective
//! sample size with Geyer initial-positive-sequence truncation, and
//! per-dimension posterior summaries. The convergence gate is R̂ < 1.1.

use serde::Serialize;

use crate::sampler::PosteriorDraws;
use crate::stats::{inverse_normal_cdf, mean, quantile, sample_sd, sample_variance};

pub const DEFAULT_RHAT_THRESHOLD: f64 = 1.1;

/// Split-R̂ for one dimension. `value` is None when the statistic is
/// undefined (too few draws or zero within-chain variance).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RhatResult {
    pub value: Option<f64>,
    pub degenerate: bool,
}

/// Splits every chain into halves (dropping the middle draw of odd chains)
/// and computes sqrt(V̂/W) with sample (n-1) variances, where W is the mean
/// within-half variance, B = n·var(half means), V̂ = (n-1)/n·W + B/n.
pub fn split_rhat_series(chains: &[Vec<f64>]) -> RhatResult {
    let mut halves: Vec<&[f64]> = Vec::with_capacity(chains.len() * 2);
    for chain in chains {
        let n = chain.len();
        if n < 4 {
            return RhatResult { value: None, degenerate: true };
        }
        let half = n / 2;
        halves.push(&chain[..half]);
        // drop the middle element when the length is odd
        halves.push(&chain[n - half..]);
    }
    let n = halves[0].len() as f64;
    let within: Vec<f64> = halves.iter().map(|h| sample_variance(h)).collect();
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let w = mean(&within);
    if w <= 0.0 {
        return RhatResult { value: None, degenerate: true };
    }
    let b = n * sample_variance(&means);
    let v_hat = (n - 1.0) / n * w + b / n;
    RhatResult { value: Some((v_hat / w).sqrt()), degenerate: false }
}

/// Rank-normalises pooled draws (fractional ranks through the normal
/// quantile function) before computing split-R̂.
pub fn split_rhat_rank_normalized(chains: &[Vec<f64>]) -> RhatResult {
    let total: usize = chains.iter().map(Vec::len).sum();
    if total == 0 {
        return RhatResult { value: None, degenerate: true };
    }
    let mut pooled: Vec<(f64, usize)> = Vec::with_capacity(total);
    let mut offsets = Vec::with_capacity(chains.len());
    let mut offset = 0;
    for chain in chains {
        offsets.push(offset);
        for &v in chain {
            pooled.push((v, offset));
            offset += 1;
        }
    }
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("NaN draw"));
    let mut z = vec![0.0; total];
    for (rank, &(_, idx)) in pooled.iter().enumerate() {
        let frac = (rank as f64 + 1.0 - 0.375) / (total as f64 + 0.25);
        z[idx] = inverse_normal_cdf(frac);
    }
    let transformed: Vec<Vec<f64>> = chains
        .iter()
        .zip(&offsets)
        .map(|(chain, &start)| z[start..start + chain.len()].to_vec())
        .collect();
    split_rhat_series(&transformed)
}

/// Per-dimension split-R̂ over the draws.
pub fn split_rhat(draws: &PosteriorDraws) -> Vec<RhatResult> {
    (0..draws.dim()).map(|d| split_rhat_series(&draws.chain_series(d))).collect()
}

/// Effective sample size for one dimension: autocorrelation-sum estimator
/// truncated at Geyer's first non-positive even/odd pair, capped at the
/// total draw count. Constant chains report 0 with the degenerate flag.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EssResult {
    pub value: f64,
    pub degenerate: bool,
}

fn autocovariance(chain: &[f64], chain_mean: f64, lag: usize) -> f64 {
    let n = chain.len();
    let mut acc = 0.0;
    for t in 0..n - lag {
        acc += (chain[t] - chain_mean) * (chain[t + lag] - chain_mean);
    }
    acc / n as f64
}

pub fn effective_sample_size_series(chains: &[Vec<f64>]) -> EssResult {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n < 8 {
        return EssResult { value: 0.0, degenerate: true };
    }
    let m = chains.len();
    let total = (m * n) as f64;

    let chain_means: Vec<f64> = chains.iter().map(|c| mean(&c[..n])).collect();
    let chain_vars: Vec<f64> = chains
        .iter()
        .zip(&chain_means)
        .map(|(c, &cm)| autocovariance(&c[..n], cm, 0) * n as f64 / (n as f64 - 1.0))
        .collect();
    let w = mean(&chain_vars);
    let mut var_plus = w * (n as f64 - 1.0) / n as f64;
    if m > 1 {
        var_plus += sample_variance(&chain_means);
    }
    if var_plus <= 0.0 {
        return EssResult { value: 0.0, degenerate: true };
    }

    let rho = |lag: usize| -> f64 {
        let acov: f64 = chains
            .iter()
            .zip(&chain_means)
            .map(|(c, &cm)| autocovariance(&c[..n], cm, lag))
            .sum::<f64>()
            / m as f64;
        1.0 - (w - acov) / var_plus
    };

    // Geyer initial positive sequence: sum rho pairs while they stay positive
    let mut tau = -1.0;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    let tau = tau.max(1e-12);
    EssResult { value: (total / tau).min(total), degenerate: false }
}

pub fn effective_sample_size(draws: &PosteriorDraws) -> Vec<EssResult> {
    (0..draws.dim()).map(|d| effective_sample_size_series(&draws.chain_series(d))).collect()
}

/// Column-wise mean, standard deviation and 5%/95% quantiles (linear
/// interpolation between order statistics).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DimensionSummary {
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q95: f64,
}

pub fn summarize(draws: &PosteriorDraws) -> Vec<DimensionSummary> {
    assert!(draws.n_draws() > 0, "summarize needs at least one draw");
    (0..draws.dim())
        .map(|d| {
            let col = draws.draws.column(d);
            DimensionSummary {
                mean: mean(&col),
                sd: sample_sd(&col),
                q05: quantile(&col, 0.05),
                q95: quantile(&col, 0.95),
            }
        })
        .collect()
}

/// The full diagnostics block persisted as JSON after a fit.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    pub names: Vec<String>,
    pub rhat: Vec<Option<f64>>,
    pub ess: Vec<f64>,
    pub degenerate: Vec<bool>,
    pub summaries: Vec<DimensionSummary>,
    pub threshold: f64,
    pub converged: bool,
    pub divergence_count: usize,
    pub mean_accept: f64,
    pub rank_normalized: bool,
}

impl DiagnosticsReport {
    pub fn compute(draws: &PosteriorDraws, names: Vec<String>, threshold: f64) -> Self {
        Self::compute_with(draws, names, threshold, false)
    }

    pub fn compute_with(
        draws: &PosteriorDraws,
        names: Vec<String>,
        threshold: f64,
        rank_normalized: bool,
    ) -> Self {
        assert_eq!(names.len(), draws.dim());
        let rhat: Vec<RhatResult> = (0..draws.dim())
            .map(|d| {
                let series = draws.chain_series(d);
                if rank_normalized {
                    split_rhat_rank_normalized(&series)
                } else {
                    split_rhat_series(&series)
                }
            })
            .collect();
        let ess = effective_sample_size(draws);
        let degenerate: Vec<bool> =
            rhat.iter().zip(&ess).map(|(r, e)| r.degenerate || e.degenerate).collect();
        // degenerate dimensions are excluded from the gate, but a run where
        // every dimension is degenerate has not converged
        let usable: Vec<f64> = rhat.iter().filter_map(|r| r.value).collect();
        let converged = !usable.is_empty()
            && rhat.iter().all(|r| r.degenerate || r.value.is_some())
            && usable.iter().all(|v| *v < threshold)
            && !rhat.iter().all(|r| r.degenerate);
        Self {
            names,
            rhat: rhat.iter().map(|r| r.value).collect(),
            ess: ess.iter().map(|e| e.value).collect(),
            degenerate,
            summaries: summarize(draws),
            threshold,
            converged,
            divergence_count: draws.divergence_count,
            mean_accept: draws.mean_accept,
            rank_normalized,
        }
    }
}
