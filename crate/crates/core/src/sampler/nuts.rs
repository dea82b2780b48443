//! One No-U-Turn transition: recursive trajectory doubling with the u-turn
//! termination criterion, divergence flagging on large energy errors, and
//! either multinomial or slice sampling over the candidate set.

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::density::LogDensity;
use crate::stats::logaddexp;

use super::TrajectorySampling;

/// Energy error above which a leapfrog step counts as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// Diagonal metric. `inv` is M⁻¹ (the estimated posterior variances when
/// adapted); momentum is drawn with standard deviation 1/√inv.
#[derive(Debug, Clone)]
pub(crate) enum MassMatrix {
    Identity,
    Diagonal { inv: Vec<f64>, mom_sd: Vec<f64> },
}

impl MassMatrix {
    pub(crate) fn diagonal(variances: Vec<f64>) -> Self {
        let mom_sd = variances.iter().map(|v| 1.0 / v.sqrt()).collect();
        Self::Diagonal { inv: variances, mom_sd }
    }

    fn kinetic(&self, momentum: &[f64]) -> f64 {
        match self {
            Self::Identity => 0.5 * momentum.iter().map(|p| p * p).sum::<f64>(),
            Self::Diagonal { inv, .. } => {
                0.5 * momentum.iter().zip(inv).map(|(p, i)| p * p * i).sum::<f64>()
            }
        }
    }

    fn velocity(&self, momentum: &[f64], i: usize) -> f64 {
        match self {
            Self::Identity => momentum[i],
            Self::Diagonal { inv, .. } => inv[i] * momentum[i],
        }
    }

    fn sample_momentum<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        for (i, p) in out.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *p = match self {
                Self::Identity => z,
                Self::Diagonal { mom_sd, .. } => z * mom_sd[i],
            };
        }
    }
}

/// Current chain position with cached log density and gradient.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub position: Vec<f64>,
    pub logp: f64,
    pub grad: Vec<f64>,
}

impl ChainState {
    pub fn new<T: LogDensity>(target: &T, position: Vec<f64>) -> Self {
        let mut grad = vec![0.0; target.dim()];
        let logp = target.logp_and_grad(&position, &mut grad);
        Self { position, logp, grad }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NutsOptions {
    pub max_tree_depth: usize,
    pub sampling: TrajectorySampling,
    pub divergence_threshold: f64,
}

impl Default for NutsOptions {
    fn default() -> Self {
        Self {
            max_tree_depth: 10,
            sampling: TrajectorySampling::Multinomial,
            divergence_threshold: DIVERGENCE_THRESHOLD,
        }
    }
}

/// Per-transition statistics feeding adaptation and the run report.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub accept_stat: f64,
    pub divergent: bool,
    pub depth: usize,
    pub n_leapfrog: usize,
}

/// One symplectic leapfrog step under the identity metric: half momentum
/// kick, full position drift, half momentum kick. A non-finite density or
/// gradient at the new point flags the step divergent.
pub fn leapfrog<T: LogDensity>(
    target: &T,
    position: &[f64],
    momentum: &[f64],
    step_size: f64,
) -> LeapfrogStep {
    let mut pos = position.to_vec();
    let mut mom = momentum.to_vec();
    let mut grad = vec![0.0; target.dim()];
    let logp0 = target.logp_and_grad(&pos, &mut grad);
    debug_assert!(logp0.is_finite(), "leapfrog started from a non-finite state");
    let finite = leapfrog_inplace(
        target,
        &MassMatrix::Identity,
        &mut pos,
        &mut mom,
        &mut grad,
        step_size,
    )
    .is_some();
    let logp = if finite { target.logp(&pos) } else { f64::NAN };
    LeapfrogStep { position: pos, momentum: mom, logp, divergent: !finite }
}

#[derive(Debug, Clone)]
pub struct LeapfrogStep {
    pub position: Vec<f64>,
    pub momentum: Vec<f64>,
    pub logp: f64,
    pub divergent: bool,
}

/// In-place leapfrog; returns the new log density, or None when it (or the
/// gradient) is non-finite.
fn leapfrog_inplace<T: LogDensity>(
    target: &T,
    mass: &MassMatrix,
    pos: &mut [f64],
    mom: &mut [f64],
    grad: &mut [f64],
    step: f64,
) -> Option<f64> {
    let half = 0.5 * step;
    for (p, g) in mom.iter_mut().zip(grad.iter()) {
        *p += half * g;
    }
    for i in 0..pos.len() {
        pos[i] += step * mass.velocity(mom, i);
    }
    let logp = target.logp_and_grad(pos, grad);
    if !logp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return None;
    }
    for (p, g) in mom.iter_mut().zip(grad.iter()) {
        *p += half * g;
    }
    Some(logp)
}

struct Tree {
    minus_pos: Vec<f64>,
    minus_mom: Vec<f64>,
    minus_grad: Vec<f64>,
    plus_pos: Vec<f64>,
    plus_mom: Vec<f64>,
    plus_grad: Vec<f64>,
    prop_pos: Vec<f64>,
    prop_logp: f64,
    prop_grad: Vec<f64>,
    log_weight: f64,
    sum_accept: f64,
    n_leaves: usize,
    divergent: bool,
    turning: bool,
}

fn uturn(tree: &Tree, mass: &MassMatrix) -> bool {
    let dim = tree.minus_pos.len();
    let mut dot_minus = 0.0;
    let mut dot_plus = 0.0;
    for i in 0..dim {
        let d = tree.plus_pos[i] - tree.minus_pos[i];
        dot_minus += d * mass.velocity(&tree.minus_mom, i);
        dot_plus += d * mass.velocity(&tree.plus_mom, i);
    }
    dot_minus < 0.0 || dot_plus < 0.0
}

struct TrajectoryCtx<'a, T> {
    target: &'a T,
    mass: &'a MassMatrix,
    step_size: f64,
    options: &'a NutsOptions,
    energy0: f64,
    /// Slice threshold (log u); unused under multinomial sampling.
    log_u: f64,
}

impl<T: LogDensity> TrajectoryCtx<'_, T> {
    /// One leapfrog step in `direction`, packaged as a single-leaf tree.
    fn leaf(
        &self,
        pos: &[f64],
        mom: &[f64],
        grad: &[f64],
        direction: i8,
    ) -> Tree {
        let mut new_pos = pos.to_vec();
        let mut new_mom = mom.to_vec();
        let mut new_grad = grad.to_vec();
        let step = f64::from(direction) * self.step_size;
        let logp = leapfrog_inplace(
            self.target,
            self.mass,
            &mut new_pos,
            &mut new_mom,
            &mut new_grad,
            step,
        );
        let (energy, logp) = match logp {
            Some(lp) => (-lp + self.mass.kinetic(&new_mom), lp),
            None => (f64::INFINITY, f64::NAN),
        };
        let delta = energy - self.energy0;
        let divergent = !delta.is_finite() || delta > self.options.divergence_threshold;
        let log_weight = if divergent {
            f64::NEG_INFINITY
        } else {
            match self.options.sampling {
                TrajectorySampling::Multinomial => -delta,
                TrajectorySampling::Slice => {
                    if self.log_u <= -energy {
                        0.0
                    } else {
                        f64::NEG_INFINITY
                    }
                }
            }
        };
        let accept = if delta.is_finite() { (-delta).min(0.0).exp() } else { 0.0 };
        Tree {
            minus_pos: new_pos.clone(),
            minus_mom: new_mom.clone(),
            minus_grad: new_grad.clone(),
            plus_pos: new_pos.clone(),
            plus_mom: new_mom.clone(),
            plus_grad: new_grad.clone(),
            prop_pos: new_pos,
            prop_logp: logp,
            prop_grad: new_grad,
            log_weight,
            sum_accept: accept,
            n_leaves: 1,
            divergent,
            turning: false,
        }
    }

    /// Builds a subtree of 2^depth leaves extending from (`pos`,`mom`,`grad`)
    /// in `direction`.
    fn build_tree<R: Rng>(
        &self,
        pos: &[f64],
        mom: &[f64],
        grad: &[f64],
        depth: usize,
        direction: i8,
        rng: &mut R,
    ) -> Tree {
        if depth == 0 {
            return self.leaf(pos, mom, grad, direction);
        }
        let mut first = self.build_tree(pos, mom, grad, depth - 1, direction, rng);
        if first.divergent || first.turning {
            return first;
        }
        let (fpos, fmom, fgrad) = if direction == 1 {
            (&first.plus_pos, &first.plus_mom, &first.plus_grad)
        } else {
            (&first.minus_pos, &first.minus_mom, &first.minus_grad)
        };
        let second = self.build_tree(
            &fpos.clone(),
            &fmom.clone(),
            &fgrad.clone(),
            depth - 1,
            direction,
            rng,
        );

        // splice the two subtrees along the integration direction
        if direction == 1 {
            first.plus_pos = second.plus_pos;
            first.plus_mom = second.plus_mom;
            first.plus_grad = second.plus_grad;
        } else {
            first.minus_pos = second.minus_pos;
            first.minus_mom = second.minus_mom;
            first.minus_grad = second.minus_grad;
        }
        first.sum_accept += second.sum_accept;
        first.n_leaves += second.n_leaves;
        first.divergent |= second.divergent;

        if !second.divergent && !second.turning {
            let total = logaddexp(first.log_weight, second.log_weight);
            if total > f64::NEG_INFINITY {
                let p_second = (second.log_weight - total).exp();
                if rng.random::<f64>() < p_second {
                    first.prop_pos = second.prop_pos;
                    first.prop_logp = second.prop_logp;
                    first.prop_grad = second.prop_grad;
                }
            }
            first.log_weight = total;
            first.turning = uturn(&first, self.mass);
        } else {
            first.turning |= second.turning;
        }
        first
    }
}

/// One NUTS transition. Doubles the trajectory until the no-u-turn criterion
/// fires, a divergence occurs, or the depth cap is reached; the new state is
/// sampled from the trajectory. A `max_tree_depth` of 0 still performs one
/// doubling, degenerating into a single accept/reject proposal.
pub fn nuts_step<T: LogDensity, R: Rng>(
    state: &mut ChainState,
    target: &T,
    step_size: f64,
    options: &NutsOptions,
    rng: &mut R,
) -> StepStats {
    nuts_step_with_mass(state, target, step_size, options, &MassMatrix::Identity, rng)
}

pub(crate) fn nuts_step_with_mass<T: LogDensity, R: Rng>(
    state: &mut ChainState,
    target: &T,
    step_size: f64,
    options: &NutsOptions,
    mass: &MassMatrix,
    rng: &mut R,
) -> StepStats {
    let dim = state.position.len();
    let mut momentum = vec![0.0; dim];
    mass.sample_momentum(rng, &mut momentum);
    let energy0 = -state.logp + mass.kinetic(&momentum);
    let exp_draw: f64 = rng.sample(Exp1);
    let ctx = TrajectoryCtx {
        target,
        mass,
        step_size,
        options,
        energy0,
        log_u: -energy0 - exp_draw,
    };

    // the current point is the root of the candidate set
    let mut tree = Tree {
        minus_pos: state.position.clone(),
        minus_mom: momentum.clone(),
        minus_grad: state.grad.clone(),
        plus_pos: state.position.clone(),
        plus_mom: momentum,
        plus_grad: state.grad.clone(),
        prop_pos: state.position.clone(),
        prop_logp: state.logp,
        prop_grad: state.grad.clone(),
        log_weight: 0.0,
        sum_accept: 0.0,
        n_leaves: 0,
        divergent: false,
        turning: false,
    };

    let max_depth = options.max_tree_depth.max(1);
    let mut depth = 0;
    let mut divergent = false;
    while depth < max_depth {
        let direction: i8 = if rng.random::<f64>() < 0.5 { -1 } else { 1 };
        let subtree = if direction == 1 {
            ctx.build_tree(
                &tree.plus_pos.clone(),
                &tree.plus_mom.clone(),
                &tree.plus_grad.clone(),
                depth,
                direction,
                rng,
            )
        } else {
            ctx.build_tree(
                &tree.minus_pos.clone(),
                &tree.minus_mom.clone(),
                &tree.minus_grad.clone(),
                depth,
                direction,
                rng,
            )
        };
        tree.sum_accept += subtree.sum_accept;
        tree.n_leaves += subtree.n_leaves;
        divergent |= subtree.divergent;

        if direction == 1 {
            tree.plus_pos = subtree.plus_pos.clone();
            tree.plus_mom = subtree.plus_mom.clone();
            tree.plus_grad = subtree.plus_grad.clone();
        } else {
            tree.minus_pos = subtree.minus_pos.clone();
            tree.minus_mom = subtree.minus_mom.clone();
            tree.minus_grad = subtree.minus_grad.clone();
        }

        depth += 1;
        if subtree.divergent || subtree.turning {
            break;
        }
        // biased progressive sampling: favour the fresh half of the
        // trajectory, clamped to an ordinary Metropolis move at depth 0
        let log_ratio = subtree.log_weight - tree.log_weight;
        if log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp() {
            tree.prop_pos = subtree.prop_pos;
            tree.prop_logp = subtree.prop_logp;
            tree.prop_grad = subtree.prop_grad;
        }
        tree.log_weight = logaddexp(tree.log_weight, subtree.log_weight);
        if uturn(&tree, mass) {
            break;
        }
    }

    let n_leapfrog = tree.n_leaves;
    let accept_stat = if n_leapfrog == 0 { 0.0 } else { tree.sum_accept / n_leapfrog as f64 };
    state.position = tree.prop_pos;
    state.logp = tree.prop_logp;
    state.grad = tree.prop_grad;
    StepStats { accept_stat, divergent, depth, n_leapfrog }
}

/// Doubling/halving heuristic for the initial step size: find an ε whose
/// single-step acceptance straddles 1/2.
pub(crate) fn find_reasonable_epsilon<T: LogDensity, R: Rng>(
    target: &T,
    state: &ChainState,
    mass: &MassMatrix,
    rng: &mut R,
) -> f64 {
    let dim = state.position.len();
    let mut momentum = vec![0.0; dim];
    mass.sample_momentum(rng, &mut momentum);
    let energy0 = -state.logp + mass.kinetic(&momentum);

    let mut eps = 1.0;
    let one_step = |eps: f64| -> Option<f64> {
        let mut pos = state.position.clone();
        let mut mom = momentum.clone();
        let mut grad = state.grad.clone();
        let logp = leapfrog_inplace(target, mass, &mut pos, &mut mom, &mut grad, eps)?;
        Some(-(-logp + mass.kinetic(&mom)) + energy0)
    };

    let mut log_ratio = one_step(eps);
    let mut guard = 0;
    while log_ratio.is_none() && guard < 60 {
        eps *= 0.5;
        log_ratio = one_step(eps);
        guard += 1;
    }
    let mut log_ratio = log_ratio.unwrap_or(f64::NEG_INFINITY);
    let a: f64 = if log_ratio > (0.5f64).ln() { 1.0 } else { -1.0 };
    let mut guard = 0;
    while a * log_ratio > -a * std::f64::consts::LN_2 && guard < 100 {
        eps *= 2f64.powf(a);
        if !(1e-10..=1e6).contains(&eps) {
            break;
        }
        log_ratio = one_step(eps).unwrap_or(f64::NEG_INFINITY);
        guard += 1;
    }
    eps.clamp(1e-10, 1e6)
}
