//! Maps between raw log scores `ℓ`, the shifted scores `ℓ' = a − ℓ`, their
//! power transforms, and ELPD values.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad;
use crate::stats::std_normal_cdf;

/// Slack allowed for `ℓ` above the density peak `a` before a score is rejected.
pub const LPRIME_CLAMP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    CubeRoot,
    Power,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub alpha: f64,
}

impl TransformSpec {
    pub fn cube_root() -> Self {
        Self { kind: TransformKind::CubeRoot, alpha: 1.0 / 3.0 }
    }

    pub fn power(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("power must be positive, got {alpha}")));
        }
        Ok(Self { kind: TransformKind::Power, alpha })
    }

    /// `x^α`; exact `cbrt` for the cube root.
    pub fn forward(&self, lprime: f64) -> Result<f64> {
        if !(lprime >= 0.0) {
            return Err(Error::InvalidParameter(format!("transform input must be nonnegative, got {lprime}")));
        }
        Ok(match self.kind {
            TransformKind::CubeRoot => lprime.cbrt(),
            TransformKind::Power => lprime.powf(self.alpha),
        })
    }

    pub fn inverse(&self, y: f64) -> Result<f64> {
        if !(y >= 0.0) {
            return Err(Error::InvalidParameter(format!("inverse transform input must be nonnegative, got {y}")));
        }
        Ok(match self.kind {
            TransformKind::CubeRoot => y * y * y,
            TransformKind::Power => y.powf(1.0 / self.alpha),
        })
    }
}

/// `a = −½ log(2π σ²)`, the log density of a normal at its own mean.
pub fn offset_a(sd: f64) -> Result<f64> {
    if !(sd > 0.0 && sd.is_finite()) {
        return Err(Error::InvalidParameter(format!("predictive sd must be positive and finite, got {sd}")));
    }
    Ok(-0.5 * (2.0 * PI * sd * sd).ln())
}

/// `ℓ' = −(ℓ − a)`; values within [`LPRIME_CLAMP_TOL`] below zero are clamped.
pub fn to_lprime(log_score: f64, a: f64) -> Result<f64> {
    let lp = a - log_score;
    if lp >= 0.0 {
        Ok(lp)
    } else if lp >= -LPRIME_CLAMP_TOL {
        Ok(0.0)
    } else {
        Err(Error::InvalidParameter(format!(
            "inconsistent score: log score {log_score} exceeds the density peak {a}"
        )))
    }
}

pub fn from_lprime(lprime: f64, a: f64) -> f64 {
    a - lprime
}

/// Local ELPD under the cube-root model, `a − f³ − 3fσ²`, i.e. `a − E[X³]`
/// for `X ~ N(f, σ²)`.
pub fn elpd_from_latent_cube(a: f64, f: f64, noise_var: f64) -> Result<f64> {
    if !(noise_var >= 0.0) {
        return Err(Error::InvalidParameter(format!("variance must be nonnegative, got {noise_var}")));
    }
    Ok(a - f * f * f - 3.0 * f * noise_var)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerElpd {
    pub elpd: f64,
    /// Mass of `N(f, σ²)` below zero that the moment integral discards.
    pub truncated_mass: f64,
}

/// Local ELPD under a general power model, `a − E[X^{1/α}; X ≥ 0]` for
/// `X ~ N(f, σ²)`, by adaptive quadrature over `[0, f + 12σ]`.
pub fn elpd_from_latent_power(a: f64, f: f64, noise_var: f64, alpha: f64) -> Result<PowerElpd> {
    if !(noise_var >= 0.0) {
        return Err(Error::InvalidParameter(format!("variance must be nonnegative, got {noise_var}")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!("power must be positive, got {alpha}")));
    }
    let exponent = 1.0 / alpha;
    let sd = noise_var.sqrt();
    if sd == 0.0 {
        let moment = if f > 0.0 { f.powf(exponent) } else { 0.0 };
        let truncated_mass = if f < 0.0 { 1.0 } else { 0.0 };
        return Ok(PowerElpd { elpd: a - moment, truncated_mass });
    }
    let truncated_mass = std_normal_cdf(-f / sd);
    let upper = f + 12.0 * sd;
    if upper <= 0.0 {
        return Ok(PowerElpd { elpd: a, truncated_mass });
    }
    let integrand = |x: f64| {
        let z = (x - f) / sd;
        (exponent * x.ln() - 0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
    };
    let q = quad::integrate(integrand, 0.0, upper, 1e-14, 1e-11)?;
    Ok(PowerElpd { elpd: a - q.value, truncated_mass })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_reference_values() {
        let a = offset_a(2f64.sqrt()).unwrap();
        assert!((a - (-0.5 * (4.0 * PI).ln())).abs() < 1e-15);
        assert!((a + 1.265_512).abs() < 1e-6);
        assert!(offset_a((1.0 / (2.0 * PI)).sqrt()).unwrap().abs() < 1e-15);
        assert!(offset_a(0.0).is_err());
        assert!(offset_a(-1.0).is_err());
    }

    #[test]
    fn lprime_cases() {
        let a = -1.265_512;
        assert_eq!(to_lprime(a, a).unwrap(), 0.0);
        assert!((to_lprime(-2.265_512, a).unwrap() - 1.0).abs() < 1e-12);
        assert!(to_lprime(a + 1.0, a).is_err());
        assert_eq!(to_lprime(a + 1e-10, a).unwrap(), 0.0);
        assert!(to_lprime(a + 1e-8, a).is_err());
    }

    #[test]
    fn forward_cases() {
        let cube = TransformSpec::cube_root();
        assert_eq!(cube.forward(0.0).unwrap(), 0.0);
        assert_eq!(cube.forward(8.0).unwrap(), 2.0);
        let sqrt = TransformSpec::power(0.5).unwrap();
        assert!((sqrt.forward(8.0).unwrap() - 2.828_427_124_746_19).abs() < 1e-12);
        assert!(cube.forward(-1.0).is_err());
        assert!(TransformSpec::power(0.0).is_err());
    }

    #[test]
    fn cube_elpd_cases() {
        assert_eq!(elpd_from_latent_cube(-1.2, 0.0, 0.7).unwrap(), -1.2);
        // E[X³] for N(2, 1) is 8 + 6.
        assert_eq!(-elpd_from_latent_cube(0.0, 2.0, 1.0).unwrap(), 14.0);
        let eta = elpd_from_latent_cube(-1.265_512, 1.0, 0.1).unwrap();
        assert!((eta + 2.565_512).abs() < 1e-12);
    }

    #[test]
    fn power_elpd_linear_case() {
        let r = elpd_from_latent_power(-1.0, 3.0, 0.25, 1.0).unwrap();
        assert!(r.truncated_mass < 1e-6);
        assert!((r.elpd - (-4.0)).abs() < 1e-8);
    }

    #[test]
    fn power_elpd_matches_cube_closed_form() {
        let a = -1.265_512;
        let r = elpd_from_latent_power(a, 2.0, 0.04, 1.0 / 3.0).unwrap();
        let closed = elpd_from_latent_cube(a, 2.0, 0.04).unwrap();
        assert!(((r.elpd - closed) / closed).abs() < 1e-4);
    }

    #[test]
    fn power_elpd_degenerate() {
        let r = elpd_from_latent_power(-0.5, 1.0, 0.0, 0.5).unwrap();
        assert_eq!(r.elpd, -1.5);
        assert_eq!(r.truncated_mass, 0.0);
    }
}
