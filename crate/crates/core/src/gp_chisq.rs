//! GP(χ²₁): scaled noncentral χ²₁ likelihood with a latent GP on `log λ`.
//!
//! `ℓ'_i ~ χ²₁(λ(z_i), b)` with `log λ ~ GP(μ, SE-ARD)` and `b ~ N⁺(1/2, ψ_b²)`.
//! The latent field is sampled in whitened form, `log λ = μ + L v` with
//! `v ~ N(0, I)` and `L` the Cholesky factor of the noise-free Gram matrix,
//! jointly with the kernel hyperparameters and `b`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::data::{PosteriorDraws, PriorConfig, ScoreDataset};
use crate::error::{Error, Result};
use crate::hmc::{self, HmcConfig, Support, TargetDensity};
use crate::kernel::{KernelConfig, DEFAULT_JITTER};
use crate::linalg::JitteredCholesky;
use crate::ncx2::ln_pdf_grad_unchecked;
use crate::priors;
use crate::stats::{log_sum_exp, LN_SQRT_2PI};

/// `ℓ'` values of exactly zero are moved here to stay inside the support.
pub const LPRIME_FLOOR: f64 = 1e-12;

/// Column names of a GP(χ²₁) draw matrix: latent first, then hyperparameters.
pub fn param_names(n: usize, d: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..n).map(|i| format!("latent[{i}]")).collect();
    names.extend((0..d).map(|j| format!("lengthscale[{j}]")));
    names.push("signal_sd".into());
    names.push("b".into());
    names
}

/// One joint draw, split into its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ChisqDraw {
    pub latent: Vec<f64>,
    pub lengthscales: Vec<f64>,
    pub signal_sd: f64,
    pub b: f64,
}

impl ChisqDraw {
    pub fn from_params(params: &[f64], n: usize, d: usize) -> Self {
        Self {
            latent: params[..n].to_vec(),
            lengthscales: params[n..n + d].to_vec(),
            signal_sd: params[n + d],
            b: params[n + d + 1],
        }
    }

    pub fn to_params(&self) -> Vec<f64> {
        let mut p = self.latent.clone();
        p.extend(&self.lengthscales);
        p.push(self.signal_sd);
        p.push(self.b);
        p
    }

    pub fn kernel(&self) -> KernelConfig {
        KernelConfig { signal_sd: self.signal_sd, lengthscales: self.lengthscales.clone(), noise_sd: 0.0, jitter: DEFAULT_JITTER }
    }
}

/// Joint posterior of the whitened latent field, kernel hyperparameters and `b`.
pub struct ChisqPosterior<'a> {
    dataset: &'a ScoreDataset,
    prior: PriorConfig,
    lprime: Vec<f64>,
}

impl<'a> ChisqPosterior<'a> {
    pub fn new(dataset: &'a ScoreDataset, prior: PriorConfig) -> Result<Self> {
        prior.validate()?;
        let lprime = dataset.lprime().iter().map(|x| x.max(LPRIME_FLOOR)).collect();
        Ok(Self { dataset, prior, lprime })
    }

    pub fn latent_mean(&self) -> f64 {
        self.prior.gp_mean.unwrap_or(0.0)
    }

    fn n(&self) -> usize {
        self.dataset.len()
    }

    fn d(&self) -> usize {
        self.dataset.dim()
    }

    /// Joint log density and its gradient in the order of [`param_names`].
    pub fn joint_log_posterior(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (n, d) = (self.n(), self.d());
        if params.len() != n + d + 2 {
            return Err(Error::DimensionMismatch { expected: n + d + 2, got: params.len() });
        }
        if params[n..].iter().any(|p| !(*p > 0.0 && p.is_finite())) || params[..n].iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidParameter("latent values must be finite and hyperparameters positive".into()));
        }
        let draw = ChisqDraw::from_params(params, n, d);
        let kernel = draw.kernel();
        let z = self.dataset.pooling_matrix();
        let gram = kernel.gram(z)?;
        let chol = JitteredCholesky::new(gram.clone(), kernel.jitter)?;
        let l = chol.l();
        let v = DVector::from_column_slice(&draw.latent);
        let eta = &l * &v;
        let mu = self.latent_mean();

        let mut value = -0.5 * v.norm_squared() - n as f64 * LN_SQRT_2PI;
        let mut g_eta = DVector::zeros(n);
        let mut d_b = 0.0;
        for i in 0..n {
            let lambda = (mu + eta[i]).exp();
            let lp = ln_pdf_grad_unchecked(self.lprime[i], lambda, draw.b);
            value += lp.value;
            g_eta[i] = lambda * lp.d_lambda;
            d_b += lp.d_scale;
        }
        if !value.is_finite() {
            return Err(Error::InvalidParameter("log density is not finite".into()));
        }

        let mut grad = vec![0.0; n + d + 2];
        let u = l.transpose() * &g_eta;
        for i in 0..n {
            grad[i] = u[i] - v[i];
        }

        // d(gᵀ L v) = ⟨dK, L⁻ᵀ S L⁻¹⟩ with S = tril(u vᵀ), diagonal halved.
        let s = DMatrix::from_fn(n, n, |a, b| match a.cmp(&b) {
            std::cmp::Ordering::Greater => u[a] * v[b],
            std::cmp::Ordering::Equal => 0.5 * u[a] * v[a],
            std::cmp::Ordering::Less => 0.0,
        });
        let l_inv = chol.l_inverse();
        let w = l_inv.transpose() * (s * &l_inv);
        let (d_signal, d_len) = kernel.gram_gradient_dot(z, &gram, &w);

        for j in 0..d {
            let (pv, pg) = priors::inverse_gamma(draw.lengthscales[j], self.prior.lengthscale_shape, self.prior.lengthscale_scale);
            value += pv;
            grad[n + j] = d_len[j] + pg;
        }
        let (pv, pg) = priors::half_normal(draw.signal_sd, self.prior.signal_sd_scale);
        value += pv;
        grad[n + d] = d_signal + pg;
        let (pv, pg) = priors::truncated_normal(draw.b, 0.5, self.prior.b_scale);
        value += pv;
        grad[n + d + 1] = d_b + pg;
        Ok((value, grad))
    }
}

impl TargetDensity for ChisqPosterior<'_> {
    fn param_names(&self) -> Vec<String> {
        param_names(self.n(), self.d())
    }

    fn supports(&self) -> Vec<Support> {
        let mut s = vec![Support::Real; self.n()];
        s.extend(vec![Support::Positive; self.d() + 2]);
        s
    }

    fn log_density_grad(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        match self.joint_log_posterior(params) {
            Ok((v, g)) => {
                grad.copy_from_slice(&g);
                v
            }
            Err(_) => f64::NAN,
        }
    }

    fn initial_point(&self, rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        let mut p: Vec<f64> = (0..self.n()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        for _ in 0..self.d() + 1 {
            p.push(rng.gen_range(-0.5..0.5f64).exp());
        }
        p.push(0.5 * rng.gen_range(-0.2..0.2f64).exp());
        Some(p)
    }
}

/// A fitted GP(χ²₁) model.
#[derive(Debug, Clone)]
pub struct ChisqModel {
    dataset: ScoreDataset,
    prior: PriorConfig,
    draws: PosteriorDraws,
    parts: Vec<ChisqDraw>,
    log_lambda: Vec<Vec<f64>>,
}

pub fn fit(dataset: &ScoreDataset, prior: &PriorConfig, cfg: &HmcConfig) -> Result<ChisqModel> {
    if dataset.len() < 2 {
        return Err(Error::InsufficientData(format!("GP(χ²₁) fit needs at least 2 records, got {}", dataset.len())));
    }
    let posterior = ChisqPosterior::new(dataset, prior.clone())?;
    let draws = hmc::sample(&posterior, cfg)?;
    ChisqModel::from_draws(dataset.clone(), prior.clone(), draws)
}

impl ChisqModel {
    pub fn from_draws(dataset: ScoreDataset, prior: PriorConfig, draws: PosteriorDraws) -> Result<Self> {
        prior.validate()?;
        let (n, d) = (dataset.len(), dataset.dim());
        let expected = param_names(n, d);
        if draws.columns() != expected.as_slice() {
            return Err(Error::Draws(format!("expected {} columns (latent, lengthscale, signal_sd, b), got {:?}", expected.len(), draws.columns())));
        }
        let parts: Vec<ChisqDraw> = draws.rows().iter().map(|r| ChisqDraw::from_params(r, n, d)).collect();
        let mu = prior.gp_mean.unwrap_or(0.0);
        let log_lambda = parts
            .iter()
            .map(|p| {
                let chol = p.kernel().factor(dataset.pooling_matrix())?;
                let eta = chol.l() * DVector::from_column_slice(&p.latent);
                Ok(eta.iter().map(|e| mu + e).collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Ok(Self { dataset, prior, draws, parts, log_lambda })
    }

    pub fn dataset(&self) -> &ScoreDataset {
        &self.dataset
    }

    pub fn draws(&self) -> &PosteriorDraws {
        &self.draws
    }

    pub fn parts(&self) -> &[ChisqDraw] {
        &self.parts
    }

    pub fn prior(&self) -> &PriorConfig {
        &self.prior
    }

    /// `log λ` at the training points, per draw.
    pub fn log_lambda_train(&self) -> &[Vec<f64>] {
        &self.log_lambda
    }

    /// Conditional moments of `log λ` at standardized query points given the
    /// training-point field, indexed `[query][draw]` as `(mean, var)`.
    pub fn log_lambda_moments_standardized(&self, zq: &DMatrix<f64>) -> Result<Vec<Vec<(f64, f64)>>> {
        let d = self.dataset.dim();
        if zq.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: zq.ncols() });
        }
        let mu = self.prior.gp_mean.unwrap_or(0.0);
        let z = self.dataset.pooling_matrix();
        let mut out = vec![Vec::with_capacity(self.parts.len()); zq.nrows()];
        for p in &self.parts {
            let kernel = p.kernel();
            let prior_var = p.signal_sd * p.signal_sd;
            if self.dataset.is_empty() {
                out.iter_mut().for_each(|row| row.push((mu, prior_var)));
                continue;
            }
            let chol = kernel.factor(z)?;
            let mut cross = kernel.cross_gram(z, zq)?;
            chol.factor.l_dirty().solve_lower_triangular_mut(&mut cross);
            // k*ᵀ K⁻¹ (Lv) = (L⁻¹ k*)ᵀ v
            let v = DVector::from_column_slice(&p.latent);
            let means = cross.transpose() * v;
            for (q, row) in out.iter_mut().enumerate() {
                let var = (prior_var - cross.column(q).norm_squared()).max(0.0);
                row.push((mu + means[q], var));
            }
        }
        Ok(out)
    }

    /// One draw of `λ` per posterior draw at each raw query point, `[query][draw]`.
    pub fn predict_lambda_batch<R: Rng + ?Sized>(&self, points: &[Vec<f64>], rng: &mut R) -> Result<Vec<Vec<f64>>> {
        let zq = self.dataset.standardizer().apply_rows(points)?;
        let moments = self.log_lambda_moments_standardized(&zq)?;
        Ok(moments
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|(m, v)| {
                        let w: f64 = rng.sample(StandardNormal);
                        (m + v.sqrt() * w).exp()
                    })
                    .collect()
            })
            .collect())
    }

    pub fn predict_lambda<R: Rng + ?Sized>(&self, z: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        Ok(self.predict_lambda_batch(&[z.to_vec()], rng)?.remove(0))
    }

    /// `η = ã − b(1 + λ(z̃))` per draw, `[query][draw]`.
    pub fn elpd_draws_batch<R: Rng + ?Sized>(&self, points: &[Vec<f64>], offsets: &[f64], rng: &mut R) -> Result<Vec<Vec<f64>>> {
        if points.len() != offsets.len() {
            return Err(Error::DimensionMismatch { expected: points.len(), got: offsets.len() });
        }
        let lambdas = self.predict_lambda_batch(points, rng)?;
        Ok(lambdas
            .into_iter()
            .zip(offsets)
            .map(|(row, &a)| row.iter().zip(&self.parts).map(|(lambda, p)| elpd(a, p.b, *lambda)).collect())
            .collect())
    }

    pub fn elpd_draws<R: Rng + ?Sized>(&self, z: &[f64], offset: f64, rng: &mut R) -> Result<Vec<f64>> {
        Ok(self.elpd_draws_batch(&[z.to_vec()], &[offset], rng)?.remove(0))
    }

    /// Posterior predictive log density of a raw log score at `z`, averaging
    /// the χ²₁ density over draws (one `λ(z)` draw per posterior draw).
    pub fn log_score_density<R: Rng + ?Sized>(&self, z: &[f64], offset: f64, log_score: f64, rng: &mut R) -> Result<f64> {
        let lprime = (offset - log_score).max(LPRIME_FLOOR);
        let lambdas = self.predict_lambda(z, rng)?;
        let terms: Vec<f64> = lambdas
            .iter()
            .zip(&self.parts)
            .map(|(lambda, p)| ln_pdf_grad_unchecked(lprime, *lambda, p.b).value)
            .collect();
        Ok(log_sum_exp(&terms) - (terms.len() as f64).ln())
    }
}

/// Local ELPD implied by a scaled χ²₁ score distribution: `a − b(1 + λ)`.
pub fn elpd(offset: f64, b: f64, lambda: f64) -> f64 {
    offset - b * (1.0 + lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SamplerDiagnostics, ScoreRecord};
    use crate::ncx2::ScaledNcx2;
    use crate::transforms::offset_a;

    fn dataset(lprime: &[f64], z: &[f64]) -> ScoreDataset {
        let a = offset_a(1.0).unwrap();
        let recs = lprime
            .iter()
            .zip(z)
            .enumerate()
            .map(|(i, (lp, zi))| ScoreRecord { id: i as i64, log_score: a - lp, predictive_sd: 1.0, pooling: vec![*zi] })
            .collect();
        ScoreDataset::new("e", vec!["z".into()], recs).unwrap()
    }

    #[test]
    fn scalar_composition() {
        let ds = dataset(&[1.7], &[0.0]);
        let prior = PriorConfig { gp_mean: Some(0.3), ..PriorConfig::default() };
        let post = ChisqPosterior::new(&ds, prior).unwrap();
        let (v, l, s, b) = (0.4, 1.1, 0.9, 0.6);
        let (value, _) = post.joint_log_posterior(&[v, l, s, b]).unwrap();
        let lambda = (0.3 + (s * s + DEFAULT_JITTER).sqrt() * v).exp();
        let expected = ScaledNcx2::new(lambda, b).unwrap().ln_pdf(1.7).unwrap() - 0.5 * v * v - LN_SQRT_2PI
            + priors::inverse_gamma(l, 5.0, 5.0).0
            + priors::half_normal(s, 1.0).0
            + priors::truncated_normal(b, 0.5, 0.25).0;
        assert!((value - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_latent_is_prior_mean_field() {
        let ds = dataset(&[0.5, 1.0, 2.0], &[0.0, 1.0, 2.0]);
        let prior = PriorConfig { gp_mean: Some(1.3), ..PriorConfig::default() };
        let draw = ChisqDraw { latent: vec![0.0; 3], lengthscales: vec![1.0], signal_sd: 1.0, b: 0.5 };
        let draws = PosteriorDraws::new(param_names(3, 1), vec![draw.to_params()], vec![0], vec![0.0], SamplerDiagnostics::default(), 0)
            .unwrap();
        let model = ChisqModel::from_draws(ds, prior, draws).unwrap();
        assert!(model.log_lambda_train()[0].iter().all(|x| *x == 1.3));
    }

    #[test]
    fn zeros_are_nudged_into_support() {
        let ds = dataset(&[0.0, 1.0], &[0.0, 1.0]);
        let post = ChisqPosterior::new(&ds, PriorConfig::default()).unwrap();
        let (value, grad) = post.joint_log_posterior(&[0.1, -0.2, 1.0, 1.0, 0.5]).unwrap();
        assert!(value.is_finite() && grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn elpd_identity() {
        assert_eq!(elpd(-1.0, 0.5, 0.0), -1.5);
        let a = -0.5 * (4.0 * std::f64::consts::PI).ln();
        for x2 in [-2.0f64, 0.0, 1.5] {
            let truth = a - 0.25 * (1.0 + x2 * x2);
            assert!((elpd(a, 0.25, x2 * x2) - truth).abs() < 1e-14);
        }
    }

    #[test]
    fn fit_requires_two_records() {
        let ds = dataset(&[1.0], &[0.0]);
        assert!(fit(&ds, &PriorConfig::default(), &HmcConfig::default()).is_err());
    }
}
