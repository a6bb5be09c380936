//! Run settings: an optional TOML file, overridden field by field by flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lpa_core::data::PriorConfig;
use lpa_core::hmc::HmcConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// GP(1/3) on cube-root transformed scores.
    Cube,
    /// Transformed-score GP with the power sampled.
    Power,
    /// GP(χ²₁) with a latent log-noncentrality field.
    Chisq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum PoolMethod {
    Natural,
    Selection,
    SoftmaxFixedC,
    Dynamic,
    Equal,
    Optimal,
}

impl PoolMethod {
    pub const ALL: [PoolMethod; 6] = [
        PoolMethod::Natural,
        PoolMethod::Selection,
        PoolMethod::SoftmaxFixedC,
        PoolMethod::Dynamic,
        PoolMethod::Equal,
        PoolMethod::Optimal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PoolMethod::Natural => "natural",
            PoolMethod::Selection => "selection",
            PoolMethod::SoftmaxFixedC => "softmax_fixed_c",
            PoolMethod::Dynamic => "dynamic",
            PoolMethod::Equal => "equal",
            PoolMethod::Optimal => "optimal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSettings {
    pub methods: Vec<PoolMethod>,
    pub c: f64,
    pub c_grid: Vec<f64>,
}

impl Default for PoolSettings {
    fn default() -> Self {
        Self { methods: PoolMethod::ALL.to_vec(), c: 1.0, c_grid: lpa_core::pooling::default_c_grid() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSettings {
    pub n: usize,
    pub replications: usize,
    /// Replications of the χ²₁ arm in `evaluate`.
    pub chisq_replications: usize,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        Self { n: 150, replications: 1, chisq_replications: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestSettings {
    /// Records used for the first fit; evaluation starts at this index.
    pub start: usize,
    /// Full refit after this many steps; in between GP(1/3) fits are
    /// conditioned on the new records with the hyperparameter draws kept.
    pub refit_every: usize,
}

impl Default for BacktestSettings {
    fn default() -> Self {
        Self { start: 30, refit_every: 25 }
    }
}

/// Everything a command needs, after merging file and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub model: ModelKind,
    pub seed: u64,
    pub out: PathBuf,
    pub pooling_vars: Option<Vec<String>>,
    pub hmc: HmcConfig,
    pub prior: PriorConfig,
    pub pool: PoolSettings,
    pub simulate: SimulateSettings,
    pub backtest: BacktestSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            model: ModelKind::Cube,
            seed: 0,
            out: PathBuf::from("lpa-out"),
            pooling_vars: None,
            hmc: HmcConfig::default(),
            prior: PriorConfig::default(),
            pool: PoolSettings::default(),
            simulate: SimulateSettings::default(),
            backtest: BacktestSettings::default(),
        }
    }
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.hmc.validate()?;
        self.prior.validate()?;
        if self.pool.c < 0.0 || self.pool.c_grid.iter().any(|c| *c < 0.0) {
            bail!("discrimination factors must be nonnegative");
        }
        if self.backtest.refit_every == 0 {
            bail!("backtest.refit_every must be positive");
        }
        Ok(())
    }
}

/// Comma-separated list of nonnegative reals.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("`{t}` is not a number")))
        .collect()
}
