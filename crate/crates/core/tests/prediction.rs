use lpa_core::data::{PosteriorDraws, PriorConfig, SamplerDiagnostics, ScoreDataset, ScoreRecord};
use lpa_core::gp_chisq::{self, ChisqModel};
use lpa_core::gp_cube::{self, CubeModel};
use lpa_core::transforms::{offset_a, TransformSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, Normal};

const JITTER: f64 = 1e-8;

fn random_dataset(n: usize, d: usize, rng: &mut ChaCha8Rng) -> ScoreDataset {
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

fn se(a: &[f64], b: &[f64], signal: f64, ls: &[f64]) -> f64 {
    let r2: f64 = a.iter().zip(b).zip(ls).map(|((x, y), l)| ((x - y) / l).powi(2)).sum();
    signal * signal * (-0.5 * r2).exp()
}

fn row(z: &DMatrix<f64>, i: usize) -> Vec<f64> {
    z.row(i).iter().copied().collect()
}

fn one_draw(columns: Vec<String>, values: Vec<f64>) -> PosteriorDraws {
    PosteriorDraws::new(columns, vec![values], vec![0], vec![0.0], SamplerDiagnostics::default(), 0).unwrap()
}

fn random_queries(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(4, d, |_, _| rng.gen_range(-2.5..2.5))
}

#[test]
fn cube_predictive_moments_match_dense_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..20 {
        let d = 1 + trial % 3;
        let ds = random_dataset(3, d, &mut rng);
        let ls: Vec<f64> = (0..d).map(|_| rng.gen_range(0.5..2.0)).collect();
        let (signal, noise, m) = (rng.gen_range(0.3..2.0), rng.gen_range(0.1..1.0), rng.gen_range(-1.0..1.0));
        let prior = PriorConfig { gp_mean: Some(m), ..PriorConfig::default() };
        let mut values = ls.clone();
        values.extend([signal, noise]);
        let draws = one_draw(gp_cube::param_names(d, false), values);
        let model = CubeModel::from_draws(ds.clone(), TransformSpec::cube_root(), prior, draws).unwrap();

        let z = ds.pooling_matrix();
        let k = DMatrix::from_fn(3, 3, |i, j| {
            se(&row(z, i), &row(z, j), signal, &ls) + if i == j { noise * noise + JITTER } else { 0.0 }
        });
        let kinv = k.try_inverse().unwrap();
        let y = DVector::from_iterator(3, ds.lprime().iter().map(|v| v.cbrt() - m));
        let zq = random_queries(d, &mut rng);
        let got = model.predict_latent_standardized(&zq).unwrap();
        for q in 0..zq.nrows() {
            let ks = DVector::from_iterator(3, (0..3).map(|i| se(&row(z, i), &row(&zq, q), signal, &ls)));
            let mean = m + ks.dot(&(&kinv * &y));
            let var = signal * signal - ks.dot(&(&kinv * &ks));
            assert!((got[q][0].mean - mean).abs() < 1e-10, "trial {trial}: {} vs {mean}", got[q][0].mean);
            assert!((got[q][0].var - var).abs() < 1e-10, "trial {trial}: {} vs {var}", got[q][0].var);
        }
    }
}

#[test]
fn chisq_predictive_moments_match_dense_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for trial in 0..20 {
        let d = 1 + trial % 2;
        let ds = random_dataset(3, d, &mut rng);
        let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let ls: Vec<f64> = (0..d).map(|_| rng.gen_range(0.5..2.0)).collect();
        let (signal, b, mu) = (rng.gen_range(0.3..2.0), rng.gen_range(0.1..1.0), rng.gen_range(-1.0..1.0));
        let prior = PriorConfig { gp_mean: Some(mu), ..PriorConfig::default() };
        let mut values = v.clone();
        values.extend(ls.iter().copied());
        values.extend([signal, b]);
        let draws = one_draw(gp_chisq::param_names(3, d), values);
        let model = ChisqModel::from_draws(ds.clone(), prior, draws).unwrap();

        let z = ds.pooling_matrix();
        let k = DMatrix::from_fn(3, 3, |i, j| se(&row(z, i), &row(z, j), signal, &ls) + if i == j { JITTER } else { 0.0 });
        let l = k.clone().cholesky().unwrap().l();
        let field = &l * DVector::from_column_slice(&v);
        for (got, want) in model.log_lambda_train()[0].iter().zip(field.iter()) {
            assert!((got - (mu + want)).abs() < 1e-10);
        }
        let kinv = k.try_inverse().unwrap();
        let zq = random_queries(d, &mut rng);
        let got = model.log_lambda_moments_standardized(&zq).unwrap();
        for q in 0..zq.nrows() {
            let ks = DVector::from_iterator(3, (0..3).map(|i| se(&row(z, i), &row(&zq, q), signal, &ls)));
            let mean = mu + ks.dot(&(&kinv * &field));
            let var = signal * signal - ks.dot(&(&kinv * &ks));
            assert!((got[q][0].0 - mean).abs() < 1e-10, "trial {trial}: {} vs {mean}", got[q][0].0);
            assert!((got[q][0].1 - var).abs() < 1e-10, "trial {trial}: {} vs {var}", got[q][0].1);
        }
    }
}

#[test]
fn cube_log_score_density_mixes_transformed_normals() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ds = random_dataset(6, 1, &mut rng);
    let rows = vec![vec![0.9, 1.1, 0.3], vec![1.4, 0.7, 0.5]];
    let draws = PosteriorDraws::new(
        gp_cube::param_names(1, false),
        rows.clone(),
        vec![0, 0],
        vec![0.0, 0.0],
        SamplerDiagnostics::default(),
        0,
    )
    .unwrap();
    let model = CubeModel::from_draws(ds, TransformSpec::cube_root(), PriorConfig::default(), draws).unwrap();
    let (z, a, ls) = ([0.4], offset_a(1.2).unwrap(), offset_a(1.2).unwrap() - 0.8);
    let moments = model.predict_latent(&z).unwrap();
    let y = 0.8f64.cbrt();
    let dens: f64 = moments
        .iter()
        .zip(&rows)
        .map(|(mo, r)| {
            let n = Normal::new(mo.mean, (mo.var + r[2] * r[2]).sqrt()).unwrap();
            n.pdf(y) / (3.0 * y * y)
        })
        .sum::<f64>()
        / 2.0;
    let got = model.log_score_density(&z, a, ls).unwrap();
    assert!((got - dens.ln()).abs() < 1e-12);
}

#[test]
fn chisq_elpd_is_offset_minus_noncentral_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ds = random_dataset(4, 1, &mut rng);
    let mut values = vec![0.0; 4];
    values.extend([1.0, 0.8, 0.25]);
    let model = ChisqModel::from_draws(ds, PriorConfig::default(), one_draw(gp_chisq::param_names(4, 1), values)).unwrap();
    let a = offset_a(2f64.sqrt()).unwrap();
    // far from the data the field reverts to its prior, log λ ~ N(0, 0.64)
    let draws: Vec<f64> = (0..40_000).map(|_| model.elpd_draws(&[1e3], a, &mut rng).unwrap()[0]).collect();
    let m = draws.iter().sum::<f64>() / draws.len() as f64;
    let want = a - 0.25 * (1.0 + (0.5 * 0.64f64).exp());
    assert!((m - want).abs() < 0.01, "{m} vs {want}");
}

#[test]
fn cube_prediction_at_training_point_with_tiny_noise_interpolates() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ds = random_dataset(5, 1, &mut rng);
    let prior = PriorConfig { gp_mean: Some(0.0), ..PriorConfig::default() };
    let draws = one_draw(gp_cube::param_names(1, false), vec![0.3, 1.0, 1e-4]);
    let model = CubeModel::from_draws(ds.clone(), TransformSpec::cube_root(), prior, draws).unwrap();
    let z = ds.records()[2].pooling.clone();
    let mo = model.predict_latent(&z).unwrap()[0];
    assert!((mo.mean - ds.ldblprime()[2]).abs() < 1e-4);
    assert!(mo.var < 1e-6);
}
