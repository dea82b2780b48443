//! Target densities for the samplers and the variational optimiser.

/// An unnormalised log density with gradient. Implementations must be pure
/// and reentrant: samplers share one target across chains.
pub trait LogDensity {
    fn dim(&self) -> usize;

    /// Writes ∇ log p into `grad` and returns log p(position), both up to
    /// the normalising constant.
    fn logp_and_grad(&self, position: &[f64], grad: &mut [f64]) -> f64;

    fn logp(&self, position: &[f64]) -> f64 {
        let mut grad = vec![0.0; self.dim()];
        self.logp_and_grad(position, &mut grad)
    }
}

/// Independent Gaussian target, mostly for calibration runs and tests.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl GaussianTarget {
    pub fn new(mean: Vec<f64>, sd: Vec<f64>) -> Self {
        assert_eq!(mean.len(), sd.len());
        assert!(sd.iter().all(|s| *s > 0.0), "sd must be positive");
        Self { mean, sd }
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], sd: vec![1.0; dim] }
    }
}

impl LogDensity for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn logp_and_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        let mut logp = 0.0;
        for i in 0..self.mean.len() {
            let z = (position[i] - self.mean[i]) / self.sd[i];
            logp -= 0.5 * z * z + self.sd[i].ln();
            grad[i] = -z / self.sd[i];
        }
        logp - 0.5 * self.mean.len() as f64 * (2.0 * std::f64::consts::PI).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn standard_normal_density_at_zero() {
        let t = GaussianTarget::standard(2);
        let mut g = vec![0.0; 2];
        let lp = t.logp_and_grad(&[0.0, 0.0], &mut g);
        assert_abs_diff_eq!(lp, -(2.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn gradient_points_to_mean() {
        let t = GaussianTarget::new(vec![3.0], vec![2.0]);
        let mut g = vec![0.0];
        t.logp_and_grad(&[1.0], &mut g);
        assert_abs_diff_eq!(g[0], (3.0 - 1.0) / 4.0, epsilon = 1e-12);
    }
}
