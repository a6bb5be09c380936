//! Log prior densities with their derivatives, as `(value, d/dx)` pairs.

use statrs::function::gamma::ln_gamma;

use crate::stats::{std_normal_cdf, LN_SQRT_2PI};

pub fn inverse_gamma(x: f64, shape: f64, scale: f64) -> (f64, f64) {
    let value = shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x;
    let grad = -(shape + 1.0) / x + scale / (x * x);
    (value, grad)
}

/// `N⁺(0, scale²)` on `x > 0`.
pub fn half_normal(x: f64, scale: f64) -> (f64, f64) {
    let z = x / scale;
    (std::f64::consts::LN_2 - LN_SQRT_2PI - scale.ln() - 0.5 * z * z, -z / scale)
}

/// `N(location, scale²)` truncated to `x > 0`.
pub fn truncated_normal(x: f64, location: f64, scale: f64) -> (f64, f64) {
    let z = (x - location) / scale;
    let mass = 1.0 - std_normal_cdf(-location / scale);
    (-LN_SQRT_2PI - scale.ln() - 0.5 * z * z - mass.ln(), -z / scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad;

    fn integral(f: impl Fn(f64) -> f64) -> f64 {
        quad::integrate_to_infinity(|x| if x > 0.0 { f(x).exp() } else { 0.0 }, 0.0, 1e-12, 1e-10).unwrap().value
    }

    #[test]
    fn densities_normalize() {
        assert!((integral(|x| inverse_gamma(x, 5.0, 5.0).0) - 1.0).abs() < 1e-8);
        assert!((integral(|x| half_normal(x, 0.7).0) - 1.0).abs() < 1e-8);
        assert!((integral(|x| truncated_normal(x, 0.5, 0.25).0) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn derivatives_match_differences() {
        let h = 1e-6;
        let fns: [&dyn Fn(f64) -> (f64, f64); 3] = [
            &|x| inverse_gamma(x, 5.0, 5.0),
            &|x| half_normal(x, 1.3),
            &|x| truncated_normal(x, 1.0 / 3.0, 0.1),
        ];
        for f in fns {
            for x in [0.2, 0.9, 2.5] {
                let fd = (f(x + h).0 - f(x - h).0) / (2.0 * h);
                assert!((f(x).1 - fd).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }
}
