//! Step-size dual averaging and diagonal metric estimation.

/// Nesterov dual averaging of `log ε` toward a target acceptance rate.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    mu: f64,
    target: f64,
    h_bar: f64,
    log_step: f64,
    log_step_bar: f64,
    t: f64,
}

const GAMMA: f64 = 0.05;
const T0: f64 = 10.0;
const KAPPA: f64 = 0.75;

impl DualAveraging {
    pub fn new(initial_step: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * initial_step).ln(),
            target,
            h_bar: 0.0,
            log_step: initial_step.ln(),
            log_step_bar: 0.0,
            t: 0.0,
        }
    }

    pub fn update(&mut self, accept_prob: f64) {
        self.t += 1.0;
        let w = 1.0 / (self.t + T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob);
        self.log_step = self.mu - self.t.sqrt() / GAMMA * self.h_bar;
        let eta = self.t.powf(-KAPPA);
        self.log_step_bar = eta * self.log_step + (1.0 - eta) * self.log_step_bar;
    }

    /// Step size to use during adaptation.
    pub fn current(&self) -> f64 {
        self.log_step.exp()
    }

    /// Averaged step size to freeze after warmup.
    pub fn averaged(&self) -> f64 {
        if self.t == 0.0 {
            self.current()
        } else {
            self.log_step_bar.exp()
        }
    }
}

/// Running per-coordinate variance (Welford).
#[derive(Debug, Clone)]
pub struct VarianceEstimator {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl VarianceEstimator {
    pub fn new(dim: usize) -> Self {
        Self { n: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn add(&mut self, x: &[f64]) {
        self.n += 1;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / self.n as f64;
            *s += delta * (v - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    /// Inverse mass matrix diagonal, shrunk toward `1e-3` as in the usual
    /// windowed-adaptation regularization.
    pub fn inverse_metric(&self) -> Vec<f64> {
        let n = self.n as f64;
        if self.n < 3 {
            return vec![1.0; self.mean.len()];
        }
        self.m2
            .iter()
            .map(|s| {
                let var = s / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_shrinks_when_acceptance_low() {
        let mut da = DualAveraging::new(1.0, 0.8);
        for _ in 0..50 {
            da.update(0.1);
        }
        assert!(da.averaged() < 1.0);
    }

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.0, 4.0, 2.0, 8.0, 5.0, 7.0];
        let mut v = VarianceEstimator::new(1);
        for x in xs {
            v.add(&[x]);
        }
        let m = xs.iter().sum::<f64>() / 6.0;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 5.0;
        let expected = (6.0 / 11.0) * var + 1e-3 * 5.0 / 11.0;
        assert!((v.inverse_metric()[0] - expected).abs() < 1e-12);
    }
}
