use lpa_core::data::{PriorConfig, ScoreDataset, ScoreRecord};
use lpa_core::gp_chisq::ChisqPosterior;
use lpa_core::gp_cube::CubePosterior;
use lpa_core::hmc::finite_difference_gradient;
use lpa_core::ncx2::ScaledNcx2;
use lpa_core::transforms::{offset_a, TransformSpec};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, InverseGamma, Normal};

fn random_dataset(n: usize, d: usize, seed: u64) -> ScoreDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recs = (0..n)
        .map(|i| {
            let sd = rng.gen_range(0.5..2.0);
            let a = offset_a(sd).unwrap();
            let lp: f64 = rng.gen_range(0.01..3.0);
            let pooling = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            ScoreRecord { id: i as i64, log_score: a - lp, predictive_sd: sd, pooling }
        })
        .collect();
    ScoreDataset::new("x", (0..d).map(|j| format!("z{j}")).collect(), recs).unwrap()
}

fn dense_gram(z: &DMatrix<f64>, signal: f64, ls: &[f64], diag: f64) -> DMatrix<f64> {
    let n = z.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        let r2: f64 = (0..z.ncols()).map(|k| ((z[(i, k)] - z[(j, k)]) / ls[k]).powi(2)).sum();
        signal * signal * (-0.5 * r2).exp() + if i == j { diag } else { 0.0 }
    })
}

fn dense_mvn_ln_pdf(x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let inv = cov.clone().try_inverse().unwrap();
    let det = cov.clone().lu().determinant();
    -0.5 * x.dot(&(&inv * x)) - 0.5 * det.ln() - 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI).ln()
}

fn ln_half_normal(x: f64, s: f64) -> f64 {
    2f64.ln() + Normal::new(0.0, s).unwrap().ln_pdf(x)
}

fn ln_truncated_normal(x: f64, loc: f64, s: f64) -> f64 {
    let n = Normal::new(loc, s).unwrap();
    n.ln_pdf(x) - (1.0 - statrs::distribution::ContinuousCDF::cdf(&n, 0.0)).ln()
}

fn assert_gradient(f: impl Fn(&[f64]) -> (f64, Vec<f64>), x: &[f64]) {
    let (_, g) = f(x);
    let fd = finite_difference_gradient(|p| f(p).0, x, 1e-6);
    for (i, (a, b)) in g.iter().zip(&fd).enumerate() {
        assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "component {i}: analytic {a}, numeric {b}");
    }
}

#[test]
fn cube_marginal_matches_dense_oracle() {
    let ds = random_dataset(12, 2, 1);
    let prior = PriorConfig { gp_mean: Some(0.7), ..PriorConfig::default() };
    let post = CubePosterior::new(&ds, prior, TransformSpec::cube_root()).unwrap();
    let (ls, s, sigma) = ([0.8, 1.7], 1.2, 0.4);
    let (value, _) = post.log_marginal_posterior(&[ls[0], ls[1], s, sigma]).unwrap();

    let cov = dense_gram(ds.pooling_matrix(), s, &ls, sigma * sigma + 1e-8);
    let y = DVector::from_iterator(12, ds.lprime().iter().map(|x| x.cbrt() - 0.7));
    let ig = InverseGamma::new(5.0, 5.0).unwrap();
    let expected = dense_mvn_ln_pdf(&y, &cov)
        + ig.ln_pdf(ls[0])
        + ig.ln_pdf(ls[1])
        + ln_half_normal(s, 1.0)
        + ln_half_normal(sigma, 1.0);
    assert!((value - expected).abs() < 1e-8, "{value} vs {expected}");
}

#[test]
fn cube_power_mode_adds_jacobian_and_prior() {
    let ds = random_dataset(8, 1, 2);
    let prior = PriorConfig { gp_mean: Some(0.2), ..PriorConfig::default() };
    let post = CubePosterior::new(&ds, prior, TransformSpec::power(0.3).unwrap()).unwrap();
    let alpha = 0.4;
    let (value, _) = post.log_marginal_posterior(&[1.1, 0.9, 0.5, alpha]).unwrap();

    let cov = dense_gram(ds.pooling_matrix(), 0.9, &[1.1], 0.25 + 1e-8);
    let y = DVector::from_iterator(8, ds.lprime().iter().map(|x| x.powf(alpha) - 0.2));
    let jac: f64 = ds.lprime().iter().map(|x| (alpha * x.powf(alpha - 1.0)).ln()).sum();
    let expected = dense_mvn_ln_pdf(&y, &cov)
        + jac
        + InverseGamma::new(5.0, 5.0).unwrap().ln_pdf(1.1)
        + ln_half_normal(0.9, 1.0)
        + ln_half_normal(0.5, 1.0)
        + ln_truncated_normal(alpha, 1.0 / 3.0, 0.1);
    assert!((value - expected).abs() < 1e-8, "{value} vs {expected}");
}

#[test]
fn chisq_whitened_density_matches_direct_parameterization() {
    let (n, d) = (10, 2);
    let ds = random_dataset(n, d, 3);
    let mu = -0.4;
    let prior = PriorConfig { gp_mean: Some(mu), ..PriorConfig::default() };
    let post = ChisqPosterior::new(&ds, prior).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (ls, s, b) = ([1.3, 0.6], 0.8, 0.45);
    let mut params = v.clone();
    params.extend([ls[0], ls[1], s, b]);
    let (value, _) = post.joint_log_posterior(&params).unwrap();

    let cov = dense_gram(ds.pooling_matrix(), s, &ls, 1e-8);
    let l = cov.clone().cholesky().unwrap().l();
    let centered = &l * DVector::from_column_slice(&v);
    let lik: f64 = centered
        .iter()
        .zip(ds.lprime())
        .map(|(e, x)| ScaledNcx2::new((mu + e).exp(), b).unwrap().ln_pdf(*x).unwrap())
        .sum();
    let ig = InverseGamma::new(5.0, 5.0).unwrap();
    let direct = dense_mvn_ln_pdf(&centered, &cov)
        + lik
        + ig.ln_pdf(ls[0])
        + ig.ln_pdf(ls[1])
        + ln_half_normal(s, 1.0)
        + ln_truncated_normal(b, 0.5, 0.25);
    let ln_abs_det_l: f64 = l.diagonal().iter().map(|x| x.ln()).sum();
    assert!((value - (direct + ln_abs_det_l)).abs() < 1e-8, "{value} vs {}", direct + ln_abs_det_l);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cube_gradient_matches_finite_differences(
        seed in 0u64..1000,
        l1 in 0.3f64..3.0, l2 in 0.3f64..3.0, s in 0.2f64..2.0, sigma in 0.1f64..1.5,
        mean in proptest::option::of(-1.0f64..2.0),
    ) {
        let ds = random_dataset(9, 2, seed);
        let prior = PriorConfig { gp_mean: mean, ..PriorConfig::default() };
        let post = CubePosterior::new(&ds, prior, TransformSpec::cube_root()).unwrap();
        assert_gradient(|p| post.log_marginal_posterior(p).unwrap(), &[l1, l2, s, sigma]);
    }

    #[test]
    fn cube_power_gradient_matches_finite_differences(
        seed in 0u64..1000,
        l1 in 0.3f64..3.0, s in 0.2f64..2.0, sigma in 0.1f64..1.5, alpha in 0.15f64..0.8,
    ) {
        let ds = random_dataset(7, 1, seed);
        let post = CubePosterior::new(&ds, PriorConfig::default(), TransformSpec::power(0.3).unwrap()).unwrap();
        assert_gradient(|p| post.log_marginal_posterior(p).unwrap(), &[l1, s, sigma, alpha]);
    }

    #[test]
    fn chisq_gradient_matches_finite_differences(
        seed in 0u64..1000,
        l1 in 0.3f64..3.0, l2 in 0.3f64..3.0, s in 0.2f64..1.5, b in 0.1f64..1.0,
        mean in proptest::option::of(-1.0f64..1.0),
    ) {
        let n = 8;
        let ds = random_dataset(n, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 17);
        let mut params: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        params.extend([l1, l2, s, b]);
        let prior = PriorConfig { gp_mean: mean, ..PriorConfig::default() };
        let post = ChisqPosterior::new(&ds, prior).unwrap();
        assert_gradient(|p| post.joint_log_posterior(p).unwrap(), &params);
    }
}
