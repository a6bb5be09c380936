//! Hamiltonian Monte Carlo with a jittered number of leapfrog steps,
//! dual-averaging step-size adaptation and a diagonal metric.
//!
//! Targets are written on their natural (constrained) scale through
//! [`TargetDensity`]; [`Unconstrained`] maps positive parameters to the log
//! scale and adds the Jacobian term before the sampler sees them.

mod adapt;
mod diagnostics;

pub use adapt::{DualAveraging, VarianceEstimator};
pub use diagnostics::split_rhat;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PosteriorDraws, SamplerDiagnostics};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    Real,
    Positive,
}

/// A differentiable unnormalized log density.
pub trait TargetDensity: Sync {
    fn param_names(&self) -> Vec<String>;

    fn supports(&self) -> Vec<Support>;

    /// Log density at `params` (constrained scale), writing the gradient into
    /// `grad`. A non-finite return marks an unusable point.
    fn log_density_grad(&self, params: &[f64], grad: &mut [f64]) -> f64;

    /// Optional chain initialization on the constrained scale.
    fn initial_point(&self, _rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        None
    }

    fn dim(&self) -> usize {
        self.supports().len()
    }
}

/// A target viewed on the unconstrained scale.
pub struct Unconstrained<'a, T: ?Sized> {
    target: &'a T,
    supports: Vec<Support>,
}

impl<'a, T: TargetDensity + ?Sized> Unconstrained<'a, T> {
    pub fn new(target: &'a T) -> Self {
        Self { supports: target.supports(), target }
    }

    pub fn dim(&self) -> usize {
        self.supports.len()
    }

    pub fn constrain(&self, q: &[f64]) -> Vec<f64> {
        q.iter()
            .zip(&self.supports)
            .map(|(v, s)| match s {
                Support::Real => *v,
                Support::Positive => v.exp(),
            })
            .collect()
    }

    pub fn unconstrain(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.supports)
            .map(|(v, s)| match s {
                Support::Real => *v,
                Support::Positive => v.ln(),
            })
            .collect()
    }

    /// Log density including the log-Jacobian of the exp map.
    pub fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        let x = self.constrain(q);
        let mut lp = self.target.log_density_grad(&x, grad);
        for i in 0..q.len() {
            if self.supports[i] == Support::Positive {
                lp += q[i];
                grad[i] = grad[i] * x[i] + 1.0;
            }
        }
        if grad.iter().all(|g| g.is_finite()) {
            lp
        } else {
            f64::NAN
        }
    }

    pub fn log_density(&self, q: &[f64]) -> f64 {
        let mut g = vec![0.0; q.len()];
        self.log_density_grad(q, &mut g)
    }
}

/// Central finite-difference gradient.
pub fn finite_difference_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Compares the analytic gradient of `target` at the unconstrained point `q`
/// with central differences, per coordinate, relative to `max(1, |analytic|)`.
/// A coordinate passes if any of the steps `h/10`, `h`, `10h` agrees, so
/// rounding or a jitter change between the two evaluations is not reported.
pub fn check_gradient<T: TargetDensity + ?Sized>(target: &T, q: &[f64], h: f64, rel_tol: f64) -> Result<()> {
    let u = Unconstrained::new(target);
    let mut g = vec![0.0; q.len()];
    let lp = u.log_density_grad(q, &mut g);
    if !lp.is_finite() {
        return Err(Error::Sampler("log density is not finite at the gradient check point".into()));
    }
    let fds: Vec<Vec<f64>> =
        [h, 0.1 * h, 10.0 * h].iter().map(|s| finite_difference_gradient(|p| u.log_density(p), q, *s)).collect();
    let names = target.param_names();
    for i in 0..q.len() {
        let tol = rel_tol * g[i].abs().max(1.0);
        if !fds.iter().any(|fd| (g[i] - fd[i]).abs() <= tol) {
            return Err(Error::GradientMismatch { parameter: names[i].clone(), analytic: g[i], numeric: fds[0][i] });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcConfig {
    pub warmup: usize,
    pub draws: usize,
    pub target_accept: f64,
    pub max_leapfrog: usize,
    /// Upper end of the jittered integration time, in metric-scaled units.
    pub path_length: f64,
    pub chains: usize,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            warmup: 500,
            draws: 1000,
            target_accept: 0.8,
            max_leapfrog: 512,
            path_length: std::f64::consts::PI,
            chains: 4,
            seed: 0,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 || self.chains == 0 || self.max_leapfrog == 0 {
            return Err(Error::InvalidParameter("draws, chains and max_leapfrog must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidParameter(format!("target acceptance must be in (0, 1), got {}", self.target_accept)));
        }
        if !(self.path_length > 0.0 && self.path_length.is_finite()) {
            return Err(Error::InvalidParameter("path length must be positive".into()));
        }
        Ok(())
    }
}

/// Position, momentum and cached log density/gradient of one point in phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub position: Vec<f64>,
    pub momentum: Vec<f64>,
    pub log_density: f64,
    pub grad: Vec<f64>,
}

impl PhasePoint {
    pub fn new<F: Fn(&[f64], &mut [f64]) -> f64>(log_density: &F, position: Vec<f64>, momentum: Vec<f64>) -> Self {
        let mut grad = vec![0.0; position.len()];
        let lp = log_density(&position, &mut grad);
        Self { position, momentum, log_density: lp, grad }
    }

    pub fn kinetic(&self, inv_mass: &[f64]) -> f64 {
        0.5 * self.momentum.iter().zip(inv_mass).map(|(p, m)| p * p * m).sum::<f64>()
    }

    /// Negative log joint density `−log π(q) + ½ pᵀM⁻¹p`.
    pub fn hamiltonian(&self, inv_mass: &[f64]) -> f64 {
        -self.log_density + self.kinetic(inv_mass)
    }
}

/// Runs `n_steps` leapfrog steps in place. Returns `false` (divergence) as
/// soon as the log density or its gradient stops being finite.
pub fn leapfrog<F: Fn(&[f64], &mut [f64]) -> f64>(
    log_density: &F,
    point: &mut PhasePoint,
    inv_mass: &[f64],
    step: f64,
    n_steps: usize,
) -> bool {
    for _ in 0..n_steps {
        for (p, g) in point.momentum.iter_mut().zip(&point.grad) {
            *p += 0.5 * step * g;
        }
        for ((q, p), m) in point.position.iter_mut().zip(&point.momentum).zip(inv_mass) {
            *q += step * m * p;
        }
        point.log_density = log_density(&point.position, &mut point.grad);
        if !point.log_density.is_finite() {
            return false;
        }
        for (p, g) in point.momentum.iter_mut().zip(&point.grad) {
            *p += 0.5 * step * g;
        }
    }
    true
}

const DIVERGENCE_THRESHOLD: f64 = 1000.0;

struct ChainOutput {
    draws: Vec<Vec<f64>>,
    log_density: Vec<f64>,
    mean_accept: f64,
    step_size: f64,
    divergences: usize,
}

struct Transition {
    accept_prob: f64,
    divergent: bool,
}

fn transition<F: Fn(&[f64], &mut [f64]) -> f64>(
    log_density: &F,
    current: &mut PhasePoint,
    inv_mass: &[f64],
    step: f64,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Transition {
    for (p, m) in current.momentum.iter_mut().zip(inv_mass) {
        let z: f64 = rng.sample(StandardNormal);
        *p = z / m.sqrt();
    }
    let h0 = current.hamiltonian(inv_mass);
    let mut proposal = current.clone();
    let finite = leapfrog(log_density, &mut proposal, inv_mass, step, n_steps);
    let h1 = proposal.hamiltonian(inv_mass);
    let delta = h0 - h1;
    if !finite || !delta.is_finite() || -delta > DIVERGENCE_THRESHOLD {
        return Transition { accept_prob: 0.0, divergent: true };
    }
    let accept_prob = delta.exp().min(1.0);
    if rng.gen::<f64>() < accept_prob {
        *current = proposal;
    }
    Transition { accept_prob, divergent: false }
}

fn initial_step<F: Fn(&[f64], &mut [f64]) -> f64>(
    log_density: &F,
    start: &PhasePoint,
    inv_mass: &[f64],
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut point = start.clone();
    for (p, m) in point.momentum.iter_mut().zip(inv_mass) {
        let z: f64 = rng.sample(StandardNormal);
        *p = z / m.sqrt();
    }
    let h0 = point.hamiltonian(inv_mass);
    let log_accept = |step: f64| {
        let mut trial = point.clone();
        if !leapfrog(log_density, &mut trial, inv_mass, step, 1) {
            return f64::NEG_INFINITY;
        }
        let v = h0 - trial.hamiltonian(inv_mass);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };
    let mut step = 1.0;
    let direction = if log_accept(step) > 0.5f64.ln() { 1.0 } else { -1.0 };
    for _ in 0..100 {
        let la = log_accept(step);
        if direction * la <= -direction * 2f64.ln() {
            break;
        }
        step *= 2f64.powf(direction);
    }
    step.clamp(1e-8, 1e3)
}

/// Metric adaptation windows `[start, end)` within warmup: an initial
/// step-size-only buffer, then windows doubling in length, the last one
/// stretched to leave a closing step-size-only buffer.
pub fn metric_windows(warmup: usize) -> Vec<(usize, usize)> {
    if warmup < 20 {
        return Vec::new();
    }
    let (init, term, base) = if warmup < 150 {
        let init = (warmup as f64 * 0.15) as usize;
        let term = (warmup as f64 * 0.1) as usize;
        (init, term, warmup - init - term)
    } else {
        (75, 50, 25)
    };
    let last = warmup - term;
    let mut windows = Vec::new();
    let (mut start, mut size) = (init, base);
    while start < last {
        let mut end = start + size;
        if end + 2 * size > last {
            end = last;
        }
        windows.push((start, end));
        start = end;
        size *= 2;
    }
    windows
}

fn run_chain<T: TargetDensity + ?Sized>(target: &T, cfg: &HmcConfig, chain: usize) -> Result<ChainOutput> {
    let ut = Unconstrained::new(target);
    let dim = ut.dim();
    let log_density = |q: &[f64], g: &mut [f64]| ut.log_density_grad(q, g);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64 + 1);

    let mut current = None;
    for attempt in 0..100 {
        let x = if attempt < 10 { target.initial_point(&mut rng) } else { None };
        let q = match x {
            Some(x) => ut.unconstrain(&x),
            None => (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        };
        let point = PhasePoint::new(&log_density, q, vec![0.0; dim]);
        if point.log_density.is_finite() {
            current = Some(point);
            break;
        }
    }
    let mut current =
        current.ok_or_else(|| Error::Sampler(format!("chain {chain}: no finite initial point in 100 attempts")))?;

    let mut inv_mass = vec![1.0; dim];
    let mut step = initial_step(&log_density, &current, &inv_mass, &mut rng);
    let mut da = DualAveraging::new(step, cfg.target_accept);
    let n_steps_max = |step: f64| ((cfg.path_length / step).ceil() as usize).clamp(1, cfg.max_leapfrog);

    let warmup = cfg.warmup;
    let windows = metric_windows(warmup);
    let mut window = 0;
    let mut var = VarianceEstimator::new(dim);

    for it in 0..warmup {
        let n_steps = rng.gen_range(1..=n_steps_max(step));
        let tr = transition(&log_density, &mut current, &inv_mass, step, n_steps, &mut rng);
        da.update(tr.accept_prob);
        step = da.current();
        if let Some(&(start, end)) = windows.get(window) {
            if it >= start {
                var.add(&current.position);
            }
            if it + 1 == end {
                inv_mass = var.inverse_metric();
                var = VarianceEstimator::new(dim);
                step = initial_step(&log_density, &current, &inv_mass, &mut rng);
                da = DualAveraging::new(step, cfg.target_accept);
                window += 1;
            }
        }
        if !step.is_finite() || step < 1e-10 {
            return Err(Error::Sampler(format!("chain {chain}: step-size adaptation failed (step {step:e})")));
        }
    }
    if warmup > 0 {
        step = da.averaged();
    }
    if !step.is_finite() || step < 1e-10 {
        return Err(Error::Sampler(format!("chain {chain}: step-size adaptation failed (step {step:e})")));
    }

    let mut out = ChainOutput {
        draws: Vec::with_capacity(cfg.draws),
        log_density: Vec::with_capacity(cfg.draws),
        mean_accept: 0.0,
        step_size: step,
        divergences: 0,
    };
    for _ in 0..cfg.draws {
        let n_steps = rng.gen_range(1..=n_steps_max(step));
        let tr = transition(&log_density, &mut current, &inv_mass, step, n_steps, &mut rng);
        out.mean_accept += tr.accept_prob / cfg.draws as f64;
        out.divergences += tr.divergent as usize;
        out.draws.push(ut.constrain(&current.position));
        out.log_density.push(current.log_density);
    }
    Ok(out)
}

/// Draws `cfg.chains × cfg.draws` samples from `target`.
///
/// The analytic gradient is checked against finite differences at a chain
/// initialization point before any sampling.
pub fn sample<T: TargetDensity + ?Sized>(target: &T, cfg: &HmcConfig) -> Result<PosteriorDraws> {
    cfg.validate()?;
    let dim = target.dim();
    if dim == 0 {
        return Err(Error::InvalidParameter("target has no parameters".into()));
    }
    let ut = Unconstrained::new(target);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let probe = (0..20)
        .map(|_| match target.initial_point(&mut rng) {
            Some(x) => ut.unconstrain(&x),
            None => (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })
        .find(|q| ut.log_density(q).is_finite());
    if let Some(q) = probe {
        check_gradient(target, &q, 1e-5, 1e-5)?;
    }

    let outputs: Vec<Result<ChainOutput>> =
        (0..cfg.chains).into_par_iter().map(|c| run_chain(target, cfg, c)).collect();
    let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;

    let divergences: usize = outputs.iter().map(|o| o.divergences).sum();
    if divergences == cfg.chains * cfg.draws {
        return Err(Error::Sampler("every sampling transition diverged".into()));
    }
    let rhat = (0..dim)
        .map(|j| {
            let per_chain: Vec<Vec<f64>> = outputs.iter().map(|o| o.draws.iter().map(|r| r[j]).collect()).collect();
            split_rhat(&per_chain)
        })
        .collect();
    let diagnostics = SamplerDiagnostics {
        chains: cfg.chains,
        acceptance: outputs.iter().map(|o| o.mean_accept).collect(),
        step_size: outputs.iter().map(|o| o.step_size).collect(),
        divergences,
        rhat,
    };
    let mut rows = Vec::with_capacity(cfg.chains * cfg.draws);
    let mut chain = Vec::with_capacity(rows.capacity());
    let mut lp = Vec::with_capacity(rows.capacity());
    for (c, o) in outputs.into_iter().enumerate() {
        chain.extend(std::iter::repeat(c).take(o.draws.len()));
        rows.extend(o.draws);
        lp.extend(o.log_density);
    }
    PosteriorDraws::new(target.param_names(), rows, chain, lp, diagnostics, cfg.seed)
}
