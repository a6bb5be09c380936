//! Squared-exponential ARD covariance.
//!
//! Observation noise is kept out of [`KernelConfig::se_ard`] and the Gram
//! builders; models add `σ_n²·I` themselves where their likelihood needs it.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::JitteredCholesky;

pub const DEFAULT_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub signal_sd: f64,
    pub lengthscales: Vec<f64>,
    pub noise_sd: f64,
    pub jitter: f64,
}

impl KernelConfig {
    pub fn new(signal_sd: f64, lengthscales: Vec<f64>, noise_sd: f64) -> Result<Self> {
        let cfg = Self { signal_sd, lengthscales, noise_sd, jitter: DEFAULT_JITTER };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.signal_sd > 0.0 && self.signal_sd.is_finite()) {
            return Err(Error::InvalidParameter(format!("signal sd must be positive, got {}", self.signal_sd)));
        }
        if self.lengthscales.is_empty() {
            return Err(Error::InvalidParameter("at least one lengthscale is required".into()));
        }
        if let Some(l) = self.lengthscales.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidParameter(format!("lengthscales must be positive, got {l}")));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise sd must be nonnegative, got {}", self.noise_sd)));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::InvalidParameter(format!("jitter must be nonnegative, got {}", self.jitter)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn se_ard(&self, zi: &[f64], zj: &[f64]) -> Result<f64> {
        let d = self.dim();
        if zi.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: zi.len() });
        }
        if zj.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: zj.len() });
        }
        Ok(self.se_ard_unchecked(zi.iter().copied(), zj.iter().copied()))
    }

    fn se_ard_unchecked(&self, zi: impl Iterator<Item = f64>, zj: impl Iterator<Item = f64>) -> f64 {
        let r2: f64 = zi
            .zip(zj)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| {
                let u = (a - b) / l;
                u * u
            })
            .sum();
        self.signal_sd * self.signal_sd * (-0.5 * r2).exp()
    }

    fn check_cols(&self, z: &DMatrix<f64>) -> Result<()> {
        if z.ncols() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: z.ncols() });
        }
        Ok(())
    }

    /// Noise-free Gram matrix over the rows of `z` (n×d).
    pub fn gram(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_cols(z)?;
        let n = z.nrows();
        let mut g = DMatrix::zeros(n, n);
        let s2 = self.signal_sd * self.signal_sd;
        for j in 0..n {
            g[(j, j)] = s2;
            for i in (j + 1)..n {
                let v = self.se_ard_unchecked(z.row(i).iter().copied(), z.row(j).iter().copied());
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        Ok(g)
    }

    /// `G(A, B)` with rows of `a` indexing the result rows.
    pub fn cross_gram(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_cols(a)?;
        self.check_cols(b)?;
        Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
            self.se_ard_unchecked(a.row(i).iter().copied(), b.row(j).iter().copied())
        }))
    }

    /// Contracts a weight matrix with the derivatives of the noise-free Gram
    /// matrix: returns `Σ_ab W_ab ∂G_ab/∂α_sig` and `Σ_ab W_ab ∂G_ab/∂l_j`
    /// for each lengthscale. `gram` must be `self.gram(z)`.
    pub fn gram_gradient_dot(&self, z: &DMatrix<f64>, gram: &DMatrix<f64>, w: &DMatrix<f64>) -> (f64, Vec<f64>) {
        let n = z.nrows();
        let d = self.dim();
        let inv_l3: Vec<f64> = self.lengthscales.iter().map(|l| 1.0 / (l * l * l)).collect();
        let mut d_signal = 0.0;
        let mut d_len = vec![0.0; d];
        for b in 0..n {
            d_signal += w[(b, b)] * gram[(b, b)];
            for a in (b + 1)..n {
                let wg = (w[(a, b)] + w[(b, a)]) * gram[(a, b)];
                d_signal += wg;
                for j in 0..d {
                    let diff = z[(a, j)] - z[(b, j)];
                    d_len[j] += wg * diff * diff * inv_l3[j];
                }
            }
        }
        (2.0 * d_signal / self.signal_sd, d_len)
    }

    /// Cholesky factor of `G(Z, Z) + σ_n²·I + jitter·I` with jitter escalation.
    pub fn factor(&self, z: &DMatrix<f64>) -> Result<JitteredCholesky> {
        let mut k = self.gram(z)?;
        let s2 = self.noise_sd * self.noise_sd;
        for i in 0..k.nrows() {
            k[(i, i)] += s2;
        }
        JitteredCholesky::new(k, self.jitter)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit() -> KernelConfig {
        KernelConfig::new(1.0, vec![1.0], 0.0).unwrap()
    }

    #[test]
    fn zero_distance_gives_signal_variance() {
        let k = KernelConfig::new(1.7, vec![0.3, 2.0], 0.1).unwrap();
        assert!((k.se_ard(&[0.4, -1.0], &[0.4, -1.0]).unwrap() - 1.7 * 1.7).abs() < 1e-15);
    }

    #[test]
    fn unit_distance() {
        assert!((unit().se_ard(&[0.0], &[1.0]).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        assert!((unit().se_ard(&[0.0], &[1.0]).unwrap() - 0.606_531).abs() < 1e-6);
    }

    #[test]
    fn decays_to_zero() {
        let k = unit();
        let vals: Vec<f64> = [0.5, 1.0, 2.0, 5.0, 40.0].iter().map(|r| k.se_ard(&[0.0], &[*r]).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(*vals.last().unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(unit().se_ard(&[0.0, 1.0], &[1.0]), Err(Error::DimensionMismatch { .. })));
        let z = DMatrix::zeros(3, 2);
        assert!(unit().gram(&z).is_err());
    }

    #[test]
    fn single_point_gram() {
        let k = KernelConfig::new(2.0, vec![1.0], 0.0).unwrap();
        let g = k.gram(&DMatrix::from_element(1, 1, 0.3)).unwrap();
        assert_eq!(g, DMatrix::from_element(1, 1, 4.0));
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(KernelConfig::new(0.0, vec![1.0], 0.0).is_err());
        assert!(KernelConfig::new(1.0, vec![1.0, -1.0], 0.0).is_err());
        assert!(KernelConfig::new(1.0, vec![], 0.0).is_err());
    }

    fn points(n: usize, d: usize) -> impl Strategy<Value = DMatrix<f64>> {
        prop::collection::vec(-3.0..3.0f64, n * d).prop_map(move |v| DMatrix::from_row_slice(n, d, &v))
    }

    proptest! {
        #[test]
        fn gram_symmetric_and_matches_cross(z in points(6, 2), l0 in 0.1..3.0f64, l1 in 0.1..3.0f64) {
            let k = KernelConfig::new(1.3, vec![l0, l1], 0.0).unwrap();
            let g = k.gram(&z).unwrap();
            prop_assert_eq!(&g, &g.transpose());
            let c = k.cross_gram(&z, &z).unwrap();
            prop_assert!((g - c).abs().max() < 1e-15);
        }

        #[test]
        fn permutation_equivariance(z in points(5, 2), seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut rng);
            let zp = DMatrix::from_fn(5, 2, |i, j| z[(perm[i], j)]);
            let k = KernelConfig::new(0.8, vec![0.7, 1.9], 0.0).unwrap();
            let g = k.gram(&z).unwrap();
            let gp = k.gram(&zp).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    prop_assert_eq!(gp[(i, j)], g[(perm[i], perm[j])]);
                }
            }
        }

        #[test]
        fn shrinking_lengthscale_reduces_covariance(
            a in prop::collection::vec(-3.0..3.0f64, 2),
            b in prop::collection::vec(-3.0..3.0f64, 2),
            l in 0.1..3.0f64,
            shrink in 0.1..1.0f64,
        ) {
            let wide = KernelConfig::new(1.0, vec![l, 1.0], 0.0).unwrap();
            let narrow = KernelConfig::new(1.0, vec![l * shrink, 1.0], 0.0).unwrap();
            prop_assert!(narrow.se_ard(&a, &b).unwrap() <= wide.se_ard(&a, &b).unwrap());
        }
    }
}
