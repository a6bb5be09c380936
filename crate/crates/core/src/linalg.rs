use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Jitter values tried, in order, after the configured one fails.
pub const JITTER_LADDER: [f64; 3] = [1e-8, 1e-6, 1e-4];

/// Cholesky factor of `matrix + jitter·I`, escalating the jitter along
/// [`JITTER_LADDER`] when the factorization fails.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    pub factor: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl JitteredCholesky {
    pub fn new(matrix: DMatrix<f64>, jitter: f64) -> Result<Self> {
        let max_diag = matrix.diagonal().iter().copied().fold(0.0, f64::max);
        let ladder = std::iter::once(jitter).chain(JITTER_LADDER.iter().copied().filter(|&j| j > jitter));
        let mut last = jitter;
        for j in ladder {
            let mut m = matrix.clone();
            for i in 0..m.nrows() {
                m[(i, i)] += j;
            }
            if let Some(factor) = Cholesky::new(m) {
                if factor.l_dirty().diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) {
                    return Ok(Self { factor, jitter: j });
                }
            }
            last = j;
        }
        Err(Error::NotPositiveDefinite { jitter: last, max_diag })
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.factor.l()
    }

    pub fn dim(&self) -> usize {
        self.factor.l_dirty().nrows()
    }

    /// `log |A|` from the factor diagonal.
    pub fn ln_det(&self) -> f64 {
        2.0 * self.factor.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(b)
    }

    /// `L⁻¹ b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        if x.nrows() > 0 {
            let ok = self.factor.l_dirty().solve_lower_triangular_mut(&mut x);
            debug_assert!(ok);
        }
        x
    }

    /// `L⁻ᵀ b`.
    pub fn solve_upper(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        if x.nrows() > 0 {
            let ok = self.factor.l_dirty().tr_solve_lower_triangular_mut(&mut x);
            debug_assert!(ok);
        }
        x
    }

    /// `L⁻¹` as a dense lower-triangular matrix.
    pub fn l_inverse(&self) -> DMatrix<f64> {
        lower_triangular_inverse(self.factor.l_dirty())
    }
}

/// Inverse of the lower triangle of `l` (the strict upper part is ignored).
pub fn lower_triangular_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let ls = l.as_slice();
    let mut x = DMatrix::<f64>::zeros(n, n);
    // Forward substitution on each unit column, as column axpys of L.
    for (j, xj) in x.as_mut_slice().chunks_exact_mut(n).enumerate() {
        xj[j] = 1.0;
        for k in j..n {
            let lk = &ls[k * n..(k + 1) * n];
            let v = xj[k] / lk[k];
            xj[k] = v;
            for (xi, li) in xj[k + 1..].iter_mut().zip(&lk[k + 1..]) {
                *xi -= v * li;
            }
        }
    }
    x
}
