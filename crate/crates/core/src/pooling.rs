//! Combination weights from per-expert ELPD posteriors, and linear pools.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{log_sum_exp, mean};

/// Convergence tolerance on the projected-gradient step of the optimal pool.
pub const OPTIMAL_POOL_TOL: f64 = 1e-8;
const OPTIMAL_POOL_MAX_ITER: usize = 20_000;

/// Weights over experts at one query point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolWeights {
    pub experts: Vec<String>,
    pub weights: Vec<f64>,
    /// Discrimination factor, for softmax-type weights.
    pub c: Option<f64>,
    /// Posterior probability that each expert has the highest ELPD.
    pub prob_best: Option<Vec<f64>>,
}

/// `c ∈ {0, 0.5, …, 20}`.
pub fn default_c_grid() -> Vec<f64> {
    (0..=40).map(|i| i as f64 * 0.5).collect()
}

fn check_aligned(draws: &[Vec<f64>]) -> Result<usize> {
    let m = draws.first().map_or(0, Vec::len);
    if draws.is_empty() || m == 0 {
        return Err(Error::InvalidParameter("need at least one expert with at least one draw".into()));
    }
    if let Some(bad) = draws.iter().find(|d| d.len() != m) {
        return Err(Error::DimensionMismatch { expected: m, got: bad.len() });
    }
    Ok(m)
}

/// Share of draws in which each expert has the strictly largest ELPD. Ties are
/// split by picking one of the tied experts uniformly at random.
pub fn prob_best<R: Rng + ?Sized>(elpd_draws: &[Vec<f64>], rng: &mut R) -> Result<Vec<f64>> {
    let m = check_aligned(elpd_draws)?;
    let k = elpd_draws.len();
    let mut counts = vec![0usize; k];
    let mut tied = Vec::with_capacity(k);
    for j in 0..m {
        let best = elpd_draws.iter().map(|d| d[j]).fold(f64::NEG_INFINITY, f64::max);
        tied.clear();
        tied.extend((0..k).filter(|&i| elpd_draws[i][j] == best));
        let winner = match tied.len() {
            0 => rng.gen_range(0..k),
            1 => tied[0],
            t => tied[rng.gen_range(0..t)],
        };
        counts[winner] += 1;
    }
    Ok(counts.into_iter().map(|c| c as f64 / m as f64).collect())
}

/// `w_k ∝ exp(c·p_k)`.
pub fn softmax_weights(experts: Vec<String>, p: &[f64], c: f64) -> Result<PoolWeights> {
    if !(c >= 0.0) {
        return Err(Error::InvalidParameter(format!("discrimination factor must be nonnegative, got {c}")));
    }
    if experts.len() != p.len() || p.is_empty() {
        return Err(Error::DimensionMismatch { expected: experts.len(), got: p.len() });
    }
    let scores: Vec<f64> = p.iter().map(|x| c * x).collect();
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(PoolWeights { experts, weights: e.iter().map(|x| x / total).collect(), c: Some(c), prob_best: Some(p.to_vec()) })
}

/// `log Σ_k w_k exp(ℓ_k)`. Experts with zero weight are dropped, so a `-inf`
/// log density only matters when it carries weight.
pub fn pooled_log_density(log_preds: &[f64], weights: &[f64]) -> Result<f64> {
    if log_preds.len() != weights.len() {
        return Err(Error::DimensionMismatch { expected: weights.len(), got: log_preds.len() });
    }
    let terms: Vec<f64> =
        log_preds.iter().zip(weights).filter(|(_, w)| **w > 0.0).map(|(l, w)| w.ln() + l).collect();
    let v = log_sum_exp(&terms);
    if v == f64::NEG_INFINITY || v.is_nan() {
        return Err(Error::InvalidParameter("all weighted experts have zero predictive density".into()));
    }
    Ok(v)
}

/// One past time step for selecting `c`: best-probabilities at that step and
/// the realized log predictive density of each expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolHistoryStep {
    pub prob_best: Vec<f64>,
    pub log_preds: Vec<f64>,
}

/// Sum of pooled log densities over a history at a fixed `c`.
pub fn dynamic_c_objective(history: &[PoolHistoryStep], c: f64) -> f64 {
    history
        .iter()
        .map(|step| {
            let names = vec![String::new(); step.prob_best.len()];
            softmax_weights(names, &step.prob_best, c)
                .and_then(|w| pooled_log_density(&step.log_preds, &w.weights))
                .unwrap_or(f64::NEG_INFINITY)
        })
        .sum()
}

/// The grid value of `c` with the best historical pooled log score; ties go
/// to the smallest `c` and an empty history gives 0.
pub fn dynamic_c(history: &[PoolHistoryStep], grid: &[f64]) -> f64 {
    if history.is_empty() || grid.is_empty() {
        return 0.0;
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut best = (grid[0], dynamic_c_objective(history, grid[0]));
    for &c in &grid[1..] {
        let v = dynamic_c_objective(history, c);
        if v > best.1 {
            best = (c, v);
        }
    }
    best.0
}

/// All weight on the expert with the highest posterior mean ELPD; ties go to
/// the first such expert.
pub fn selection_weights(experts: Vec<String>, elpd_draws: &[Vec<f64>]) -> Result<PoolWeights> {
    check_aligned(elpd_draws)?;
    if experts.len() != elpd_draws.len() {
        return Err(Error::DimensionMismatch { expected: experts.len(), got: elpd_draws.len() });
    }
    let means: Vec<f64> = elpd_draws.iter().map(|d| mean(d)).collect();
    let mut best = 0;
    for (i, m) in means.iter().enumerate() {
        if *m > means[best] {
            best = i;
        }
    }
    let mut weights = vec![0.0; means.len()];
    weights[best] = 1.0;
    Ok(PoolWeights { experts, weights, c: None, prob_best: None })
}

pub fn natural_weights(experts: Vec<String>, p: &[f64]) -> Result<PoolWeights> {
    if experts.len() != p.len() {
        return Err(Error::DimensionMismatch { expected: experts.len(), got: p.len() });
    }
    Ok(PoolWeights { experts, weights: p.to_vec(), c: None, prob_best: Some(p.to_vec()) })
}

pub fn equal_weights(experts: Vec<String>) -> PoolWeights {
    let k = experts.len();
    PoolWeights { experts, weights: vec![1.0 / k as f64; k], c: None, prob_best: None }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Mean historical log score of the pool, `1/n Σ_i log Σ_k w_k exp(ℓ_ik)`.
pub fn optimal_pool_objective(scores: &[Vec<f64>], w: &[f64]) -> f64 {
    scores.iter().map(|row| pooled_log_density(row, w).unwrap_or(f64::NEG_INFINITY)).sum::<f64>() / scores.len() as f64
}

struct PoolProblem {
    /// `exp(ℓ_ik − max_k ℓ_ik)`
    e: Vec<Vec<f64>>,
    shift: f64,
}

impl PoolProblem {
    fn eval(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let n = self.e.len() as f64;
        let mut value = self.shift;
        let mut grad = vec![0.0; w.len()];
        for row in &self.e {
            let s: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum();
            if s <= 0.0 {
                return (f64::NEG_INFINITY, grad);
            }
            value += s.ln() / n;
            for (g, a) in grad.iter_mut().zip(row) {
                *g += a / (s * n);
            }
        }
        (value, grad)
    }
}

/// Weights maximizing the historical log score of the linear pool over the
/// simplex (spectral projected gradient). Experts with identical score
/// columns share their combined weight equally.
pub fn optimal_pool_weights(experts: Vec<String>, scores: &[Vec<f64>]) -> Result<PoolWeights> {
    let k = experts.len();
    if scores.is_empty() || k == 0 {
        return Err(Error::InsufficientData("optimal pool needs at least one row and one expert".into()));
    }
    if let Some(bad) = scores.iter().find(|r| r.len() != k) {
        return Err(Error::DimensionMismatch { expected: k, got: bad.len() });
    }
    if scores.iter().flatten().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::InvalidParameter("log scores must not be NaN or +inf".into()));
    }

    // Collapse identical columns.
    let column = |j: usize| scores.iter().map(move |r| r[j]);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for j in 0..k {
        match groups.iter_mut().find(|g| column(g[0]).eq(column(j))) {
            Some(g) => g.push(j),
            None => groups.push(vec![j]),
        }
    }

    let mut shift = 0.0;
    let mut e = Vec::with_capacity(scores.len());
    for row in scores {
        let reduced: Vec<f64> = groups.iter().map(|g| row[g[0]]).collect();
        let top = reduced.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if top == f64::NEG_INFINITY {
            return Err(Error::InvalidParameter("a row has zero density under every expert".into()));
        }
        shift += top / scores.len() as f64;
        e.push(reduced.iter().map(|x| (x - top).exp()).collect());
    }
    let problem = PoolProblem { e, shift };
    let reduced = spg(&problem, groups.len())?;

    let mut weights = vec![0.0; k];
    for (g, w) in groups.iter().zip(&reduced) {
        for &j in g {
            weights[j] = w / g.len() as f64;
        }
    }
    Ok(PoolWeights { experts, weights, c: None, prob_best: None })
}

fn spg(problem: &PoolProblem, k: usize) -> Result<Vec<f64>> {
    let mut w = vec![1.0 / k as f64; k];
    let (mut f, mut g) = problem.eval(&w);
    let mut alpha = 1.0;
    for _ in 0..OPTIMAL_POOL_MAX_ITER {
        let full: Vec<f64> = w.iter().zip(&g).map(|(a, b)| a + b).collect();
        let stationarity = project_simplex(&full).iter().zip(&w).map(|(p, x)| (p - x).abs()).fold(0.0, f64::max);
        if stationarity <= OPTIMAL_POOL_TOL {
            return Ok(w);
        }
        let trial: Vec<f64> = w.iter().zip(&g).map(|(a, b)| a + alpha * b).collect();
        let d: Vec<f64> = project_simplex(&trial).iter().zip(&w).map(|(p, x)| p - x).collect();
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut t = 1.0;
        let (w_new, f_new, g_new) = loop {
            let cand: Vec<f64> = w.iter().zip(&d).map(|(a, b)| (a + t * b).max(0.0)).collect();
            let (fc, gc) = problem.eval(&cand);
            if fc >= f + 1e-4 * t * slope {
                break (cand, fc, gc);
            }
            t *= 0.5;
            if t < 1e-30 {
                return Err(Error::NoConvergence { iterations: 0, residual: stationarity });
            }
        };
        let s: Vec<f64> = w_new.iter().zip(&w).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum();
        alpha = if sy < 0.0 { (ss / -sy).clamp(1e-10, 1e10) } else { 1e10 };
        w = w_new;
        f = f_new;
        g = g_new;
    }
    let full: Vec<f64> = w.iter().zip(&g).map(|(a, b)| a + b).collect();
    let residual = project_simplex(&full).iter().zip(&w).map(|(p, x)| (p - x).abs()).fold(0.0, f64::max);
    Err(Error::NoConvergence { iterations: OPTIMAL_POOL_MAX_ITER, residual })
}
