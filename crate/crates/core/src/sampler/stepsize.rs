//! Dual-averaging step size adaptation driving the acceptance statistic
//! toward its target. The anchor `mu` is the log of the initial step, so a
//! chain that already hits the target exactly keeps its step size.

#[derive(Debug, Clone)]
pub struct DualAveraging {
    target_accept: f64,
    mu: f64,
    log_step: f64,
    log_step_avg: f64,
    h_bar: f64,
    count: u64,
    gamma: f64,
    t0: f64,
    kappa: f64,
}

impl DualAveraging {
    pub fn new(initial_step: f64, target_accept: f64) -> Self {
        assert!(initial_step > 0.0);
        Self {
            target_accept,
            mu: initial_step.ln(),
            log_step: initial_step.ln(),
            log_step_avg: initial_step.ln(),
            h_bar: 0.0,
            count: 0,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
        }
    }

    /// Feeds one iteration's mean acceptance statistic.
    pub fn advance(&mut self, accept_stat: f64) {
        self.count += 1;
        let m = self.count as f64;
        let w = 1.0 / (m + self.t0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target_accept - accept_stat.clamp(0.0, 1.0));
        self.log_step = self.mu - m.sqrt() / self.gamma * self.h_bar;
        let eta = m.powf(-self.kappa);
        self.log_step_avg = eta * self.log_step + (1.0 - eta) * self.log_step_avg;
    }

    /// Step size to use for the next warmup iteration.
    pub fn current(&self) -> f64 {
        self.log_step.exp()
    }

    /// Smoothed step size, frozen in after warmup ends.
    pub fn adapted(&self) -> f64 {
        self.log_step_avg.exp()
    }
}
