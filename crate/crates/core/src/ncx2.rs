//! The scaled noncentral χ² distribution with one degree of freedom.
//!
//! If `W ~ N(0, 1)` then `X = b·(W + √λ)²` follows `χ²₁(λ, b)`. The density is
//! `(1/b)·f(x/b)` with `f(u) = exp(−(u + λ)/2)·cosh(√(λu)) / √(2πu)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{std_normal_cdf, LN_SQRT_2PI};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledNcx2 {
    pub lambda: f64,
    pub scale: f64,
}

/// `log cosh(z)` without overflow.
pub fn ln_cosh(z: f64) -> f64 {
    let a = z.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// `tanh(s)/s`, continuous at zero.
fn tanh_over(s: f64) -> f64 {
    if s < 1e-4 {
        1.0 - s * s / 3.0
    } else {
        s.tanh() / s
    }
}

/// Log density together with its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPdfGrad {
    pub value: f64,
    pub d_lambda: f64,
    pub d_scale: f64,
}

impl ScaledNcx2 {
    pub fn new(lambda: f64, scale: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("noncentrality must be nonnegative, got {lambda}")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidParameter(format!("scale must be positive, got {scale}")));
        }
        Ok(Self { lambda, scale })
    }

    pub fn mean(&self) -> f64 {
        self.scale * (1.0 + self.lambda)
    }

    pub fn variance(&self) -> f64 {
        self.scale * self.scale * 2.0 * (1.0 + 2.0 * self.lambda)
    }

    pub fn ln_pdf(&self, x: f64) -> Result<f64> {
        Ok(self.ln_pdf_grad(x)?.value)
    }

    pub fn ln_pdf_grad(&self, x: f64) -> Result<LogPdfGrad> {
        if !(x > 0.0) {
            return Err(Error::InvalidParameter(format!("density support is x > 0, got {x}")));
        }
        Ok(ln_pdf_grad_unchecked(x, self.lambda, self.scale))
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let r = (x / self.scale).sqrt();
        let m = self.lambda.sqrt();
        std_normal_cdf(r - m) - std_normal_cdf(-r - m)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        let shift = self.lambda.sqrt();
        (0..n)
            .map(|_| {
                let w: f64 = rng.sample(StandardNormal);
                self.scale * (w + shift).powi(2)
            })
            .collect()
    }
}

/// Log density and partials without domain checks; callers guarantee
/// `x > 0`, `λ ≥ 0`, `b > 0`.
pub(crate) fn ln_pdf_grad_unchecked(x: f64, lambda: f64, scale: f64) -> LogPdfGrad {
    let u = x / scale;
    let s = (lambda * u).sqrt();
    let value = -scale.ln() - LN_SQRT_2PI - 0.5 * u.ln() - 0.5 * (u + lambda) + ln_cosh(s);
    let t = tanh_over(s);
    let d_lambda = -0.5 + 0.5 * u * t;
    let d_u = -0.5 / u - 0.5 + 0.5 * lambda * t;
    let d_scale = -1.0 / scale - d_u * u / scale;
    LogPdfGrad { value, d_lambda, d_scale }
}
