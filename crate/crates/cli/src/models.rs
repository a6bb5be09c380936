use std::path::Path;

use anyhow::{bail, Context, Result};
use lpa_core::data::{PosteriorDraws, PriorConfig, ScoreDataset};
use lpa_core::gp_chisq::{self, ChisqModel};
use lpa_core::gp_cube::{self, CubeModel};
use lpa_core::hmc::HmcConfig;
use lpa_core::transforms::TransformSpec;
use rand::Rng;

use crate::config::ModelKind;

pub enum Fitted {
    Cube(CubeModel),
    Chisq(ChisqModel),
}

fn transform(kind: ModelKind, prior: &PriorConfig) -> Result<TransformSpec> {
    Ok(match kind {
        ModelKind::Power => TransformSpec::power(prior.power_location)?,
        _ => TransformSpec::cube_root(),
    })
}

/// Model kind implied by the parameter columns of a draws file.
pub fn kind_of(draws: &PosteriorDraws) -> ModelKind {
    if draws.column_index("b").is_some() {
        ModelKind::Chisq
    } else if draws.column_index("power_alpha").is_some() {
        ModelKind::Power
    } else {
        ModelKind::Cube
    }
}

impl Fitted {
    pub fn fit(dataset: &ScoreDataset, kind: ModelKind, prior: &PriorConfig, hmc: &HmcConfig) -> Result<Self> {
        Ok(match kind {
            ModelKind::Chisq => Fitted::Chisq(gp_chisq::fit(dataset, prior, hmc)?),
            _ => Fitted::Cube(gp_cube::fit(dataset, transform(kind, prior)?, prior, hmc)?),
        })
    }

    pub fn load(dataset: &ScoreDataset, path: &Path, expected: Option<ModelKind>, prior: &PriorConfig) -> Result<Self> {
        let draws = PosteriorDraws::load(path).with_context(|| format!("loading draws {}", path.display()))?;
        let kind = kind_of(&draws);
        if let Some(e) = expected {
            if e != kind {
                bail!("{} holds {kind:?} draws but --model is {e:?}", path.display());
            }
        }
        Ok(match kind {
            ModelKind::Chisq => Fitted::Chisq(ChisqModel::from_draws(dataset.clone(), prior.clone(), draws)?),
            _ => Fitted::Cube(CubeModel::from_draws(dataset.clone(), transform(kind, prior)?, prior.clone(), draws)?),
        })
    }

    pub fn draws(&self) -> &PosteriorDraws {
        match self {
            Fitted::Cube(m) => m.draws(),
            Fitted::Chisq(m) => m.draws(),
        }
    }

    pub fn elpd_draws_batch<R: Rng + ?Sized>(&self, points: &[Vec<f64>], offsets: &[f64], rng: &mut R) -> Result<Vec<Vec<f64>>> {
        Ok(match self {
            Fitted::Cube(m) => m.elpd_draws_batch(points, offsets, rng)?,
            Fitted::Chisq(m) => m.elpd_draws_batch(points, offsets, rng)?,
        })
    }

    pub fn elpd_draws<R: Rng + ?Sized>(&self, z: &[f64], offset: f64, rng: &mut R) -> Result<Vec<f64>> {
        let mut v = self.elpd_draws_batch(&[z.to_vec()], &[offset], rng)?;
        Ok(v.pop().unwrap_or_default())
    }

    pub fn log_score_density<R: Rng + ?Sized>(&self, z: &[f64], offset: f64, log_score: f64, rng: &mut R) -> Result<f64> {
        Ok(match self {
            Fitted::Cube(m) => m.log_score_density(z, offset, log_score)?,
            Fitted::Chisq(m) => m.log_score_density(z, offset, log_score, rng)?,
        })
    }

    /// Conditions a GP(1/3) fit on a longer dataset with the same
    /// hyperparameter draws. GP(χ²₁) latent draws are tied to the training
    /// points, so that model is returned unchanged.
    pub fn extend(&self, dataset: &ScoreDataset) -> Result<Self> {
        Ok(match self {
            Fitted::Cube(m) => Fitted::Cube(m.with_dataset(dataset.clone())?),
            Fitted::Chisq(m) => Fitted::Chisq(m.clone()),
        })
    }
}

/// Divergence share at most 5% and every finite split-R̂ at most 1.05.
pub fn diagnostics_ok(draws: &PosteriorDraws) -> bool {
    let d = &draws.diagnostics;
    let share = d.divergences as f64 / draws.len() as f64;
    let rhat = d.max_rhat();
    share <= 0.05 && !(rhat > 1.05)
}
