//! Dense least-squares building blocks.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, PermutationSequence};

use crate::error::{Error, Result};

/// Relative pivot size below which a column is treated as dependent.
pub const RANK_TOL: f64 = 1e-10;

/// Relative Cholesky pivot size below which a Gram matrix is treated as
/// singular. Squaring the design halves the usable digits, hence the looser
/// threshold than [`RANK_TOL`].
pub const GRAM_RANK_TOL: f64 = 1e-7;

/// Column-pivoted QR factorization `X P = Q R` of a full-rank design, kept
/// around so that refits on the same design cost `O(np)`.
#[derive(Debug, Clone)]
pub struct LsFactor {
    q: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    perm: PermutationSequence<Dyn>,
}

impl LsFactor {
    pub fn new(x: &DMatrix<f64>) -> Result<Self> {
        let (n, p) = x.shape();
        if n < p || p == 0 {
            return Err(Error::RankDeficient { rank: n.min(p), p });
        }
        let qr = x.clone().col_piv_qr();
        let r = qr.r();
        let diag: Vec<f64> = (0..p).map(|j| r[(j, j)].abs()).collect();
        let largest = diag.iter().cloned().fold(0.0, f64::max);
        let rank = diag.iter().filter(|&&d| d > RANK_TOL * largest).count();
        if rank < p || !largest.is_finite() || largest == 0.0 {
            return Err(Error::RankDeficient { rank, p });
        }
        let r_inv = r
            .solve_upper_triangular(&DMatrix::identity(p, p))
            .ok_or(Error::RankDeficient { rank: p - 1, p })?;
        let perm = qr.p().clone();
        Ok(LsFactor { q: qr.q(), r_inv, perm })
    }

    pub fn nrows(&self) -> usize {
        self.q.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.q.ncols()
    }

    /// Least-squares coefficients for response `y`.
    pub fn solve(&self, y: &DVector<f64>) -> DVector<f64> {
        let qty = self.q.tr_mul(y);
        let mut z = &self.r_inv * qty;
        self.perm.inv_permute_rows(&mut z);
        z
    }

    /// Leverages `h_i = ||Q_i||^2`.
    pub fn hat_diagonal(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.nrows(),
            self.q.row_iter().map(|row| row.norm_squared()),
        )
    }

    /// `(X'X)^{-1}` in the original column order.
    pub fn xtx_inverse(&self) -> DMatrix<f64> {
        let mut g = &self.r_inv * self.r_inv.transpose();
        self.perm.inv_permute_rows(&mut g);
        self.perm.inv_permute_columns(&mut g);
        g
    }

    /// The vector `a` with `v'beta_hat(y) = a'y` for every response `y`.
    pub fn contrast_map(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut pv = v.clone();
        self.perm.permute_rows(&mut pv);
        let w = self.r_inv.tr_mul(&pv);
        &self.q * w
    }

    /// The `p x n` matrix `(X'X)^{-1} X'`.
    pub fn influence(&self) -> DMatrix<f64> {
        let mut m = &self.r_inv * self.q.transpose();
        self.perm.inv_permute_rows(&mut m);
        m
    }
}

/// Scratch buffers for repeated weighted Gram products.
#[derive(Debug, Clone)]
pub struct GramWorkspace {
    scaled: DMatrix<f64>,
    scaled_t: DMatrix<f64>,
    gram: DMatrix<f64>,
}

impl GramWorkspace {
    pub fn new(n: usize, p: usize) -> Self {
        GramWorkspace {
            scaled: DMatrix::zeros(n, p),
            scaled_t: DMatrix::zeros(p, n),
            gram: DMatrix::zeros(p, p),
        }
    }

    /// Forms `X' diag(d) X` for nonnegative `d`.
    pub fn gram(&mut self, x: &DMatrix<f64>, d: &[f64]) -> &DMatrix<f64> {
        let (n, p) = x.shape();
        if self.scaled.shape() != (n, p) {
            *self = GramWorkspace::new(n, p);
        }
        for j in 0..p {
            let src = x.column(j);
            let mut dst = self.scaled.column_mut(j);
            for i in 0..n {
                dst[i] = src[i] * d[i].sqrt();
            }
        }
        // an explicit transpose lets gemm take the blocked kernel path,
        // which is several times faster than gemm_tr here
        self.scaled.transpose_to(&mut self.scaled_t);
        self.gram.gemm(1.0, &self.scaled_t, &self.scaled, 0.0);
        &self.gram
    }

    /// Cholesky factor of `X' diag(d) X`, or `None` when it is numerically
    /// singular.
    pub fn factor(&mut self, x: &DMatrix<f64>, d: &[f64]) -> Option<Cholesky<f64, Dyn>> {
        let gram = self.gram(x, d).clone();
        checked_cholesky(gram)
    }
}

/// Cholesky factorization with a relative pivot check.
pub fn checked_cholesky(gram: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let chol = Cholesky::new(gram)?;
    let l = chol.l_dirty();
    let p = l.nrows();
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for j in 0..p {
        let d = l[(j, j)];
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if !(hi.is_finite() && hi > 0.0 && lo > GRAM_RANK_TOL * hi) {
        return None;
    }
    Some(chol)
}

/// `X' u`.
pub fn xt_times(x: &DMatrix<f64>, u: &DVector<f64>) -> DVector<f64> {
    x.tr_mul(u)
}
