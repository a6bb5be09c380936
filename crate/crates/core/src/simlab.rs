//! Simulation study: one Gaussian expert that ignores a relevant covariate.
//!
//! `y = x₁ + x₂ + ε` with `x₁, x₂, ε` iid standard normal. The expert predicts
//! `N(x₁, 2)`, so its local ELPD over the pooling variable `z = x₂` is
//! `−½ log 4π − ¼(1 + x₂²)`. The study fits both GP models to replicated
//! datasets and scores their ELPD posteriors on a grid of `x₂` against that
//! truth.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PriorConfig, ScoreDataset, ScoreRecord};
use crate::error::{Error, Result};
use crate::hmc::HmcConfig;
use crate::stats::{self, kde_ln_density, normal_ln_pdf, std_normal_pdf};
use crate::transforms::{offset_a, TransformSpec};
use crate::{gp_chisq, gp_cube};

/// Predictive variance of the simulated expert.
pub const EXPERT_VARIANCE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimScenario {
    pub n: usize,
    pub replications: usize,
    pub grid: Vec<f64>,
    pub seed: u64,
}

impl Default for SimScenario {
    fn default() -> Self {
        Self { n: 150, replications: 50, grid: default_grid(), seed: 0 }
    }
}

/// 61 equispaced points on `[−3, 3]`.
pub fn default_grid() -> Vec<f64> {
    (0..61).map(|i| -3.0 + 0.1 * i as f64).collect()
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::InvalidParameter(format!("scenario needs n >= 10, got {}", self.n)));
        }
        if self.replications == 0 {
            return Err(Error::InvalidParameter("scenario needs at least one replication".into()));
        }
        if self.grid.is_empty() || self.grid.iter().any(|x| !(-3.0..=3.0).contains(x)) {
            return Err(Error::InvalidParameter("grid must be nonempty and within [-3, 3]".into()));
        }
        Ok(())
    }

    /// Seed owned by replication `r`.
    pub fn replication_seed(&self, r: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(r as u64 + 1);
        rng.gen()
    }
}

/// A simulated dataset together with its covariates and outcomes.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: ScoreDataset,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub y: Vec<f64>,
}

/// `−½ log 4π`, the offset of the simulated expert.
pub fn expert_offset() -> f64 {
    -0.5 * (2.0 * PI * EXPERT_VARIANCE).ln()
}

/// Simulates `n` observations with the scenario's own seed.
pub fn simulate(scenario: &SimScenario) -> Result<SimulatedData> {
    scenario.validate()?;
    simulate_with_seed(scenario.n, scenario.seed)
}

pub fn simulate_with_seed(n: usize, seed: u64) -> Result<SimulatedData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = EXPERT_VARIANCE.sqrt();
    let a = offset_a(sd)?;
    let (mut x1, mut x2, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let u: f64 = rng.sample(StandardNormal);
        let v: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        let yi = u + v + e;
        let log_score = a - (yi - u).powi(2) / (2.0 * EXPERT_VARIANCE);
        records.push(ScoreRecord { id: i as i64, log_score, predictive_sd: sd, pooling: vec![v] });
        x1.push(u);
        x2.push(v);
        y.push(yi);
    }
    let dataset = ScoreDataset::new("expert", vec!["x2".into()], records)?;
    Ok(SimulatedData { dataset, x1, x2, y })
}

/// `η(x₂) = −½ log 4π − ¼(1 + x₂²)`.
pub fn true_elpd(x2: f64) -> f64 {
    expert_offset() - 0.25 * (1.0 + x2 * x2)
}

fn normal_weights(grid: &[f64]) -> (Vec<f64>, f64) {
    let w: Vec<f64> = grid.iter().map(|x| std_normal_pdf(*x)).collect();
    let total = w.iter().sum();
    (w, total)
}

/// Squared error integrated against the standard normal density of `x₂`.
pub fn mise(estimate: &[f64], truth: &[f64], grid: &[f64]) -> Result<f64> {
    if estimate.len() != grid.len() || truth.len() != grid.len() {
        return Err(Error::DimensionMismatch { expected: grid.len(), got: estimate.len().min(truth.len()) });
    }
    let (w, total) = normal_weights(grid);
    Ok(estimate.iter().zip(truth).zip(&w).map(|((e, t), w)| w * (e - t).powi(2)).sum::<f64>() / total)
}

/// Log posterior density of the truth (Gaussian KDE of the draws), integrated
/// against the standard normal density of `x₂`.
pub fn mils(draws: &[Vec<f64>], truth: &[f64], grid: &[f64]) -> Result<f64> {
    if draws.len() != grid.len() || truth.len() != grid.len() {
        return Err(Error::DimensionMismatch { expected: grid.len(), got: draws.len().min(truth.len()) });
    }
    let (w, total) = normal_weights(grid);
    let mut acc = 0.0;
    for ((d, t), w) in draws.iter().zip(truth).zip(&w) {
        acc += w * kde_ln_density(d, *t)?;
    }
    Ok(acc / total)
}

/// Naive predictors of the next log score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkMethod {
    /// `ℓ'_i ~ N(ℓ'_{i−1}, σ²)`
    LprimeRw,
    /// `ℓ'_i ~ N(μ, σ²)` fitted on all earlier scores
    LprimeMean,
    /// `ℓ''_i ~ N(ℓ''_{i−1}, σ²)`
    LdblprimeRw,
    /// `ℓ''_i ~ N(μ, σ²)` fitted on all earlier scores
    LdblprimeMean,
}

impl BenchmarkMethod {
    pub const ALL: [BenchmarkMethod; 4] =
        [BenchmarkMethod::LprimeRw, BenchmarkMethod::LprimeMean, BenchmarkMethod::LdblprimeRw, BenchmarkMethod::LdblprimeMean];

    pub fn name(self) -> &'static str {
        match self {
            BenchmarkMethod::LprimeRw => "lprime_rw",
            BenchmarkMethod::LprimeMean => "lprime_cumulative_mean",
            BenchmarkMethod::LdblprimeRw => "ldblprime_rw",
            BenchmarkMethod::LdblprimeMean => "ldblprime_cumulative_mean",
        }
    }

    fn cube_scale(self) -> bool {
        matches!(self, BenchmarkMethod::LdblprimeRw | BenchmarkMethod::LdblprimeMean)
    }

    fn random_walk(self) -> bool {
        matches!(self, BenchmarkMethod::LprimeRw | BenchmarkMethod::LdblprimeRw)
    }
}

impl std::str::FromStr for BenchmarkMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lprime_rw" => Ok(Self::LprimeRw),
            "lprime_mean" | "lprime_cumulative_mean" => Ok(Self::LprimeMean),
            "ldblprime_rw" => Ok(Self::LdblprimeRw),
            "ldblprime_mean" | "ldblprime_cumulative_mean" => Ok(Self::LdblprimeMean),
            _ => Err(Error::InvalidParameter(format!("unknown benchmark method {s:?}"))),
        }
    }
}

/// Smallest variance a benchmark may fit, so constant histories stay finite.
const BENCHMARK_VAR_FLOOR: f64 = 1e-12;

/// One-step-ahead prediction of record `index`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkStep {
    pub index: usize,
    /// Predictive mean and sd on the modeled scale.
    pub mean: f64,
    pub sd: f64,
    /// Log density of the realized raw log score.
    pub log_density: f64,
}

/// Log density of a raw log score `ℓ = a − y³` when `y ~ N(mean, sd²)`.
pub fn ldblprime_log_density(log_score: f64, offset: f64, mean: f64, sd: f64) -> f64 {
    let y = (offset - log_score).cbrt();
    normal_ln_pdf(y, mean, sd) - 3f64.ln() - 2.0 * y.abs().max(f64::MIN_POSITIVE).ln()
}

/// Expanding-window one-step-ahead predictive log densities of the raw log
/// scores. Parameters are maximum-likelihood fits on all earlier records;
/// the first prediction is for record 2 (0-based).
pub fn benchmark_predict(dataset: &ScoreDataset, method: BenchmarkMethod) -> Result<Vec<BenchmarkStep>> {
    let n = dataset.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!("benchmarks need at least 3 records, got {n}")));
    }
    let series: &[f64] = if method.cube_scale() { dataset.ldblprime() } else { dataset.lprime() };
    let log_scores = dataset.log_scores();
    let offsets = dataset.offsets();
    let mut out = Vec::with_capacity(n - 2);
    for i in 2..n {
        let history = &series[..i];
        let (mean, var) = if method.random_walk() {
            let var = history.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / (i - 1) as f64;
            (history[i - 1], var)
        } else {
            let m = stats::mean(history);
            (m, history.iter().map(|x| (x - m).powi(2)).sum::<f64>() / i as f64)
        };
        let sd = var.max(BENCHMARK_VAR_FLOOR).sqrt();
        let log_density = if method.cube_scale() {
            ldblprime_log_density(log_scores[i], offsets[i], mean, sd)
        } else {
            normal_ln_pdf(series[i], mean, sd)
        };
        out.push(BenchmarkStep { index: i, mean, sd, log_density });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyModel {
    GpCube,
    GpChisq,
}

impl StudyModel {
    pub fn name(self) -> &'static str {
        match self {
            StudyModel::GpCube => "gp_cube",
            StudyModel::GpChisq => "gp_chisq",
        }
    }
}

/// Posterior summary of `η(x₂)` at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub replication: usize,
    pub model: StudyModel,
    pub x2: f64,
    pub truth: f64,
    pub mean: f64,
    pub median: f64,
    pub hpd_low: f64,
    pub hpd_high: f64,
    pub central_low: f64,
    pub central_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationMetrics {
    pub replication: usize,
    pub model: StudyModel,
    pub seed: u64,
    pub mise: f64,
    pub log_mise: f64,
    pub mils: f64,
    pub divergences: usize,
    pub max_rhat: f64,
}

/// Replications at the 2.5th, 50th and 97.5th percentile of MISE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileReplications {
    pub model: StudyModel,
    pub p025: usize,
    pub p500: usize,
    pub p975: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub metrics: Vec<ReplicationMetrics>,
    pub grid: Vec<GridSummary>,
    pub percentiles: Vec<PercentileReplications>,
}

impl StudyResult {
    pub fn metrics_for(&self, model: StudyModel) -> Vec<&ReplicationMetrics> {
        self.metrics.iter().filter(|m| m.model == model).collect()
    }

    pub fn grid_for(&self, model: StudyModel, replication: usize) -> Vec<&GridSummary> {
        self.grid.iter().filter(|g| g.model == model && g.replication == replication).collect()
    }
}

/// Share of grid points with `lo < x₂ < hi` whose 95% HPD interval covers the truth.
pub fn hpd_coverage(summaries: &[&GridSummary], lo: f64, hi: f64) -> f64 {
    let inside: Vec<_> = summaries.iter().filter(|g| g.x2 > lo && g.x2 < hi).collect();
    let covered = inside.iter().filter(|g| g.hpd_low <= g.truth && g.truth <= g.hpd_high).count();
    covered as f64 / inside.len() as f64
}

/// Index (into `values`) of the empirical `q`-quantile by rank.
pub fn percentile_index(values: &[f64], q: f64) -> usize {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    order[(q * (values.len() - 1) as f64).round() as usize]
}

/// Fits `model` to one simulated dataset and scores its ELPD posterior on the grid.
pub fn run_replication(
    data: &SimulatedData,
    model: StudyModel,
    grid: &[f64],
    prior: &PriorConfig,
    hmc: &HmcConfig,
    replication: usize,
    seed: u64,
) -> Result<(ReplicationMetrics, Vec<GridSummary>)> {
    let cfg = HmcConfig { seed, ..hmc.clone() };
    let points: Vec<Vec<f64>> = grid.iter().map(|x| vec![*x]).collect();
    let offsets = vec![expert_offset(); grid.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let (draws, diagnostics) = match model {
        StudyModel::GpCube => {
            let fitted = gp_cube::fit(&data.dataset, TransformSpec::cube_root(), prior, &cfg)?;
            (fitted.elpd_draws_batch(&points, &offsets, &mut rng)?, fitted.draws().diagnostics.clone())
        }
        StudyModel::GpChisq => {
            let fitted = gp_chisq::fit(&data.dataset, prior, &cfg)?;
            (fitted.elpd_draws_batch(&points, &offsets, &mut rng)?, fitted.draws().diagnostics.clone())
        }
    };
    let truth: Vec<f64> = grid.iter().map(|x| true_elpd(*x)).collect();
    let summaries: Vec<GridSummary> = grid
        .iter()
        .zip(&draws)
        .zip(&truth)
        .map(|((x2, d), t)| {
            let hpd = stats::hpd_interval(d, 0.95);
            let central = stats::central_interval(d, 0.95);
            GridSummary {
                replication,
                model,
                x2: *x2,
                truth: *t,
                mean: stats::mean(d),
                median: stats::quantile(d, 0.5),
                hpd_low: hpd.0,
                hpd_high: hpd.1,
                central_low: central.0,
                central_high: central.1,
            }
        })
        .collect();
    let means: Vec<f64> = summaries.iter().map(|s| s.mean).collect();
    let mise = mise(&means, &truth, grid)?;
    let metrics = ReplicationMetrics {
        replication,
        model,
        seed,
        mise,
        log_mise: mise.ln(),
        mils: mils(&draws, &truth, grid)?,
        divergences: diagnostics.divergences,
        max_rhat: diagnostics.max_rhat(),
    };
    Ok((metrics, summaries))
}

/// Runs every replication for every requested model. Replication `r` uses the
/// same simulated dataset for all models; results are ordered by model, then
/// replication.
pub fn run_study(scenario: &SimScenario, models: &[StudyModel], prior: &PriorConfig, hmc: &HmcConfig) -> Result<StudyResult> {
    run_study_replications(scenario, models, prior, hmc, scenario.replications)
}

/// Like [`run_study`] but with per-model replication counts capped at `cap`
/// for the χ²₁ model (the first `cap` replications are shared).
pub fn run_study_replications(
    scenario: &SimScenario,
    models: &[StudyModel],
    prior: &PriorConfig,
    hmc: &HmcConfig,
    chisq_replications: usize,
) -> Result<StudyResult> {
    scenario.validate()?;
    let mut result = StudyResult::default();
    for &model in models {
        let reps = match model {
            StudyModel::GpCube => scenario.replications,
            StudyModel::GpChisq => chisq_replications.min(scenario.replications),
        };
        let outputs: Vec<Result<(ReplicationMetrics, Vec<GridSummary>)>> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let seed = scenario.replication_seed(r);
                let data = simulate_with_seed(scenario.n, seed)?;
                run_replication(&data, model, &scenario.grid, prior, hmc, r, seed)
            })
            .collect();
        let mut mises = Vec::with_capacity(reps);
        for out in outputs {
            let (m, g) = out?;
            mises.push(m.mise);
            result.metrics.push(m);
            result.grid.extend(g);
        }
        result.percentiles.push(PercentileReplications {
            model,
            p025: percentile_index(&mises, 0.025),
            p500: percentile_index(&mises, 0.5),
            p975: percentile_index(&mises, 0.975),
        });
    }
    Ok(result)
}
