//! Small statistical helpers shared across modules: normal densities,
//! log-sum-exp, empirical summaries, Kolmogorov–Smirnov distances and a
//! Gaussian kernel density estimate.

use std::f64::consts::PI;

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn normal_ln_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - LN_SQRT_2PI
}

pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// `log Σ exp(x_i)`, returning `-∞` for an empty slice or all `-∞` inputs.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Linear-interpolation quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(xs: &[f64], q: f64) -> f64 {
    quantile_sorted(&sorted(xs), q)
}

/// Shortest interval containing `ceil(mass * n)` of the draws.
pub fn hpd_interval(xs: &[f64], mass: f64) -> (f64, f64) {
    let s = sorted(xs);
    let n = s.len();
    let k = ((mass * n as f64).ceil() as usize).clamp(1, n);
    let mut best = (s[0], s[n - 1]);
    let mut width = f64::INFINITY;
    for i in 0..=(n - k) {
        let w = s[i + k - 1] - s[i];
        if w < width {
            width = w;
            best = (s[i], s[i + k - 1]);
        }
    }
    best
}

pub fn central_interval(xs: &[f64], mass: f64) -> (f64, f64) {
    let s = sorted(xs);
    let tail = 0.5 * (1.0 - mass);
    (quantile_sorted(&s, tail), quantile_sorted(&s, 1.0 - tail))
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let a = sorted(a);
    let b = sorted(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// One-sample Kolmogorov–Smirnov statistic against a continuous CDF.
pub fn ks_one_sample<F: Fn(f64) -> f64>(xs: &[f64], cdf: F) -> f64 {
    let s = sorted(xs);
    let n = s.len() as f64;
    s.iter().enumerate().fold(0.0_f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// Silverman's rule-of-thumb bandwidth `0.9 · min(sd, IQR/1.34) · n^(-1/5)`.
pub fn silverman_bandwidth(xs: &[f64]) -> f64 {
    let s = sorted(xs);
    let sd = variance(xs).sqrt();
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (xs.len() as f64).powf(-0.2)
}

/// Log of a Gaussian kernel density estimate of `draws` evaluated at `x`.
pub fn kde_ln_density(draws: &[f64], x: f64) -> Result<f64> {
    if draws.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "density estimation needs at least 2 draws, got {}",
            draws.len()
        )));
    }
    let h = silverman_bandwidth(draws);
    if !(h > 0.0) {
        return Err(Error::InvalidParameter("draws are degenerate; bandwidth is zero".into()));
    }
    let terms: Vec<f64> = draws.iter().map(|&d| normal_ln_pdf(x, d, h)).collect();
    Ok(log_sum_exp(&terms) - (draws.len() as f64).ln())
}
