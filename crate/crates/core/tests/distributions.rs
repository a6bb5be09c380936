use lpa_core::hmc::finite_difference_gradient;
use lpa_core::ncx2::{ln_cosh, ScaledNcx2};
use lpa_core::stats::{ks_one_sample, mean, variance};
use lpa_core::transforms::{
    elpd_from_latent_cube, elpd_from_latent_power, from_lprime, offset_a, to_lprime, TransformSpec,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF, Discrete, Normal, Poisson};

/// Noncentral χ²₁ density as a Poisson mixture of central χ² densities.
fn poisson_mixture_ln_pdf(x: f64, lambda: f64, b: f64) -> f64 {
    let u = x / b;
    if lambda == 0.0 {
        return ChiSquared::new(1.0).unwrap().ln_pdf(u) - b.ln();
    }
    let pois = Poisson::new(lambda / 2.0).unwrap();
    let terms: Vec<f64> = (0..600u64)
        .map(|j| pois.ln_pmf(j) + ChiSquared::new(1.0 + 2.0 * j as f64).unwrap().ln_pdf(u))
        .filter(|t| t.is_finite())
        .collect();
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln() - b.ln()
}

/// Composite Simpson integral of the density after `x = b t²`, which removes
/// the `x^{-1/2}` singularity at the origin.
fn total_mass(d: &ScaledNcx2) -> f64 {
    let upper = d.lambda.sqrt() + 14.0;
    let steps = 20_000;
    let h = upper / steps as f64;
    let g = |t: f64| {
        if t == 0.0 {
            // limit of pdf(b t²)·2bt as t → 0
            2.0 * (-0.5 * d.lambda).exp() / (2.0 * std::f64::consts::PI).sqrt()
        } else {
            let x = d.scale * t * t;
            d.ln_pdf(x).unwrap().exp() * 2.0 * d.scale * t
        }
    };
    let mut s = g(0.0) + g(upper);
    for i in 1..steps {
        s += g(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn density_matches_poisson_mixture() {
    for (lambda, b) in [(0.0, 1.0), (0.3, 0.25), (1.0, 0.5), (4.0, 2.0), (10.0, 0.7), (60.0, 1.3)] {
        let d = ScaledNcx2::new(lambda, b).unwrap();
        for x in [1e-6, 0.01, 0.3, 1.0, 2.5, 7.0, 20.0, 60.0] {
            let got = d.ln_pdf(x).unwrap();
            let want = poisson_mixture_ln_pdf(x, lambda, b);
            assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "λ={lambda} b={b} x={x}: {got} vs {want}");
        }
    }
}

#[test]
fn density_integrates_to_one() {
    for lambda in [0.0, 1.0, 4.0, 10.0] {
        for b in [0.25, 1.0, 3.0] {
            let m = total_mass(&ScaledNcx2::new(lambda, b).unwrap());
            assert!((m - 1.0).abs() < 1e-6, "λ={lambda} b={b}: mass {m}");
        }
    }
}

#[test]
fn sample_moments_and_cdf() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (lambda, b) in [(0.0, 0.5), (1.0, 0.25), (4.0, 1.0), (10.0, 2.0)] {
        let d = ScaledNcx2::new(lambda, b).unwrap();
        let xs = d.sample(&mut rng, 100_000);
        let se = (d.variance() / xs.len() as f64).sqrt();
        assert!((mean(&xs) - b * (1.0 + lambda)).abs() < 4.0 * se);
        assert!((variance(&xs) / d.variance() - 1.0).abs() < 0.05);
        assert!(ks_one_sample(&xs, |x| d.cdf(x)) < 0.01);
    }
}

#[test]
fn cdf_is_integral_of_density() {
    let d = ScaledNcx2::new(2.0, 0.6).unwrap();
    for x in [0.2, 1.0, 3.0, 8.0] {
        // Simpson in t = √(x/b) on [0, √(x/b)]
        let upper = (x / d.scale).sqrt();
        let steps = 4000;
        let h = upper / steps as f64;
        let g = |t: f64| {
            if t == 0.0 {
                2.0 * (-0.5 * d.lambda).exp() / (2.0 * std::f64::consts::PI).sqrt()
            } else {
                d.ln_pdf(d.scale * t * t).unwrap().exp() * 2.0 * d.scale * t
            }
        };
        let mut s = g(0.0) + g(upper);
        for i in 1..steps {
            s += g(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        assert!((s * h / 3.0 - d.cdf(x)).abs() < 1e-9);
    }
}

#[test]
fn gaussian_log_scores_are_scaled_noncentral_chisq() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (mu_star, sd_star, mu_k, sd_k) in [(0.0, 1.0, 0.5, 1.5), (1.0, 2.0, -1.0, 1.0), (0.0, 1.0, 0.0, 1.0)] {
        let expert = Normal::new(mu_k, sd_k).unwrap();
        let a = offset_a(sd_k).unwrap();
        let xs: Vec<f64> = (0..100_000)
            .map(|_| {
                let y = mu_star + sd_star * rng.sample::<f64, _>(StandardNormal);
                a - expert.ln_pdf(y)
            })
            .collect();
        let lambda = ((mu_star - mu_k) / sd_star).powi(2);
        let b = sd_star * sd_star / (2.0 * sd_k * sd_k);
        let d = ScaledNcx2::new(lambda, b).unwrap();
        let ks = ks_one_sample(&xs, |x| d.cdf(x));
        assert!(ks < 0.01, "KS {ks}");
    }
}

#[test]
fn offset_is_normal_density_at_its_mean() {
    for sd in [0.1, 1.0, 2f64.sqrt(), 7.5] {
        let want = Normal::new(3.0, sd).unwrap().ln_pdf(3.0);
        assert!((offset_a(sd).unwrap() - want).abs() < 1e-14);
    }
    assert!(offset_a(0.0).is_err());
    assert!(offset_a(f64::NAN).is_err());
}

#[test]
fn cube_elpd_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let (a, f, s): (f64, f64, f64) = (rng.gen_range(-2.0..0.0), rng.gen_range(-0.5..2.0), rng.gen_range(0.05..0.8));
        let draws: Vec<f64> = (0..200_000)
            .map(|_| {
                let x = f + s * rng.sample::<f64, _>(StandardNormal);
                a - x * x * x
            })
            .collect();
        let se = (variance(&draws) / draws.len() as f64).sqrt();
        let exact = elpd_from_latent_cube(a, f, s * s).unwrap();
        assert!((mean(&draws) - exact).abs() < 4.0 * se, "{} vs {exact}", mean(&draws));
    }
}

#[test]
fn power_elpd_matches_truncated_square_moment() {
    let std = Normal::new(0.0, 1.0).unwrap();
    for (f, s) in [(0.4, 0.3), (-0.2, 0.5), (1.5, 0.1), (0.0, 1.0)] {
        let r = f / s;
        let moment = (f * f + s * s) * std.cdf(r) + f * s * std.pdf(r);
        let got = elpd_from_latent_power(-1.0, f, s * s, 0.5).unwrap();
        assert!((got.elpd - (-1.0 - moment)).abs() < 1e-9, "f={f} s={s}");
        assert!((got.truncated_mass - std.cdf(-r)).abs() < 1e-12);
    }
}

#[test]
fn power_at_one_third_agrees_with_cube_away_from_zero() {
    let p = elpd_from_latent_power(-1.2, 2.0, 0.04, 1.0 / 3.0).unwrap();
    let c = elpd_from_latent_cube(-1.2, 2.0, 0.04).unwrap();
    assert!((p.elpd - c).abs() < 1e-9);
}

#[test]
fn ln_pdf_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let (x, lambda, b): (f64, f64, f64) = (rng.gen_range(0.01..10.0), rng.gen_range(0.01..20.0), rng.gen_range(0.1..3.0));
        let g = ScaledNcx2::new(lambda, b).unwrap().ln_pdf_grad(x).unwrap();
        let fd = finite_difference_gradient(|p| ScaledNcx2::new(p[0], p[1]).unwrap().ln_pdf(x).unwrap(), &[lambda, b], 1e-6);
        assert!((g.d_lambda - fd[0]).abs() < 1e-6 * fd[0].abs().max(1.0));
        assert!((g.d_scale - fd[1]).abs() < 1e-6 * fd[1].abs().max(1.0));
    }
}

#[test]
fn ln_cosh_is_stable() {
    assert_eq!(ln_cosh(0.0), 0.0);
    assert!((ln_cosh(1.0) - 1f64.cosh().ln()).abs() < 1e-15);
    assert!((ln_cosh(-800.0) - (800.0 - std::f64::consts::LN_2)).abs() < 1e-12);
}

proptest! {
    #[test]
    fn cube_transform_round_trips(x in 0.0f64..1e6) {
        let t = TransformSpec::cube_root();
        let back = t.inverse(t.forward(x).unwrap()).unwrap();
        prop_assert!((back - x).abs() <= 1e-12 * x.max(1.0));
    }

    #[test]
    fn power_transform_round_trips(x in 0.0f64..1e3, alpha in 0.05f64..3.0) {
        let t = TransformSpec::power(alpha).unwrap();
        let back = t.inverse(t.forward(x).unwrap()).unwrap();
        prop_assert!((back - x).abs() <= 1e-9 * x.max(1.0));
    }

    #[test]
    fn lprime_round_trips_and_is_nonnegative(sd in 0.01f64..100.0, gap in 0.0f64..50.0) {
        let a = offset_a(sd).unwrap();
        let lp = to_lprime(a - gap, a).unwrap();
        prop_assert!(lp >= 0.0);
        prop_assert!((from_lprime(lp, a) - (a - gap)).abs() <= 1e-12 * a.abs().max(gap).max(1.0));
    }

    #[test]
    fn ncx2_mean_is_monotone_in_lambda(l1 in 0.0f64..50.0, dl in 0.0f64..50.0, b in 0.01f64..10.0) {
        let lo = ScaledNcx2::new(l1, b).unwrap();
        let hi = ScaledNcx2::new(l1 + dl, b).unwrap();
        prop_assert!(hi.mean() >= lo.mean());
        prop_assert!(hi.cdf(1.0) <= lo.cdf(1.0) + 1e-15);
    }
}
