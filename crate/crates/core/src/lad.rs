//! Exact weighted least-absolute-deviations fits by vertex descent.
//!
//! An optimum of `sum w_i |y_i - X_i'b|` is attained at a vertex where `p`
//! rows (the basis `B`) are interpolated. At a vertex the optimality test is
//! `|u_k| <= 1` for the multipliers solving `X_B'(w_B u) = -g_N`, where `g_N`
//! is the sign gradient of the other rows. A violated multiplier names a
//! basis row to release; an exact line search along the resulting edge picks
//! the row that enters. The basis inverse is carried by rank-one updates and
//! refreshed periodically.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const REFRESH_EVERY: usize = 200;
const OPT_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub(crate) struct LadFit {
    pub beta: DVector<f64>,
    pub residuals: DVector<f64>,
    pub pivots: usize,
    pub optimal: bool,
    /// `max(0, max_k |u_k| - 1)` at the final vertex.
    pub violation: f64,
}

struct Vertex<'a> {
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    w: Vec<f64>,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    binv: DMatrix<f64>,
    beta: DVector<f64>,
    resid: DVector<f64>,
    /// `w_i sign(r_i)` for nonbasic rows off zero, else 0.
    signs: Vec<f64>,
    /// `X' signs`, kept in step with `signs`.
    grad: DVector<f64>,
}

impl<'a> Vertex<'a> {
    fn refresh(&mut self) -> bool {
        let p = self.basis.len();
        let xb = DMatrix::from_fn(p, p, |r, c| self.x[(self.basis[r], c)]);
        let Some(inv) = xb.try_inverse() else {
            return false;
        };
        let yb = DVector::from_fn(p, |r, _| self.y[self.basis[r]]);
        self.beta = &inv * yb;
        self.binv = inv;
        self.resid = self.y - self.x * &self.beta;
        for &i in &self.basis {
            self.resid[i] = 0.0;
        }
        self.rebuild_gradient();
        self.beta.iter().all(|v| v.is_finite())
    }

    fn sign_of(&self, i: usize) -> f64 {
        if self.in_basis[i] || self.resid[i] == 0.0 {
            0.0
        } else {
            self.w[i] * self.resid[i].signum()
        }
    }

    fn rebuild_gradient(&mut self) {
        let n = self.x.nrows();
        self.signs = (0..n).map(|i| self.sign_of(i)).collect();
        self.grad = self.x.tr_mul(&DVector::from_column_slice(&self.signs));
    }

    /// Updates `grad` for the rows whose sign changed since the last call.
    fn sync_gradient(&mut self) {
        for i in 0..self.x.nrows() {
            let s = self.sign_of(i);
            let change = s - self.signs[i];
            if change != 0.0 {
                self.grad.axpy(change, &self.x.row(i).transpose(), 1.0);
                self.signs[i] = s;
            }
        }
    }

    /// Recomputes the residuals and reports whether the basis rows are still
    /// interpolated to working precision after the rank-one updates.
    fn accurate(&mut self) -> bool {
        let fresh = self.y - self.x * &self.beta;
        let scale = 1.0 + self.y.amax();
        let drift = self.basis.iter().map(|&i| fresh[i].abs()).fold(0.0, f64::max);
        self.resid = fresh;
        for &i in &self.basis {
            self.resid[i] = 0.0;
        }
        self.rebuild_gradient();
        drift <= 1e-10 * scale
    }

    /// Multipliers `u` for the basis rows.
    fn multipliers(&self) -> DVector<f64> {
        let p = self.x.ncols();
        let z = self.binv.tr_mul(&self.grad);
        DVector::from_fn(p, |k, _| -z[k] / self.w[self.basis[k]])
    }
}

/// Picks `p` linearly independent positive-weight rows, preferring small
/// residuals, by Gram-Schmidt on the rows.
fn initial_basis(x: &DMatrix<f64>, w: &[f64], resid: &DVector<f64>) -> Result<Vec<usize>> {
    let (n, p) = x.shape();
    let mut order: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
    order.sort_by(|&a, &b| resid[a].abs().total_cmp(&resid[b].abs()));
    let mut ortho: Vec<DVector<f64>> = Vec::with_capacity(p);
    let mut basis = Vec::with_capacity(p);
    for &i in &order {
        let row = x.row(i).transpose();
        let norm = row.norm();
        if norm == 0.0 {
            continue;
        }
        let mut v = row;
        for q in &ortho {
            let c = q.dot(&v);
            v.axpy(-c, q, 1.0);
        }
        let rest = v.norm();
        if rest > 1e-8 * norm {
            ortho.push(v / rest);
            basis.push(i);
            if basis.len() == p {
                return Ok(basis);
            }
        }
    }
    Err(Error::RankDeficient { rank: basis.len(), p })
}

pub(crate) fn lad(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    weights: Option<&[f64]>,
    start: &DVector<f64>,
    max_pivots: usize,
) -> Result<LadFit> {
    let (n, p) = x.shape();
    let w: Vec<f64> = weights.map_or_else(|| vec![1.0; n], |w| w.to_vec());
    let start_resid = y - x * start;
    let basis = initial_basis(x, &w, &start_resid)?;
    let mut in_basis = vec![false; n];
    for &i in &basis {
        in_basis[i] = true;
    }
    let mut v = Vertex {
        x,
        y,
        w,
        basis,
        in_basis,
        binv: DMatrix::zeros(p, p),
        beta: DVector::zeros(p),
        resid: DVector::zeros(n),
        signs: Vec::new(),
        grad: DVector::zeros(p),
    };
    if !v.refresh() {
        return Err(Error::RankDeficient { rank: p - 1, p });
    }

    let mut pivots = 0;
    let mut since_refresh = 0;
    let mut events: Vec<(f64, f64, usize)> = Vec::with_capacity(n);
    loop {
        let u = v.multipliers();
        let (j, uj) = u
            .iter()
            .enumerate()
            .map(|(k, &val)| (k, val))
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .expect("basis is nonempty");
        let violation = (uj.abs() - 1.0).max(0.0);
        if violation <= OPT_TOL || pivots >= max_pivots {
            if since_refresh > 0 && !v.accurate() {
                // confirm on a freshly factored basis
                if !v.refresh() {
                    return Err(Error::RankDeficient { rank: p - 1, p });
                }
                since_refresh = 0;
                continue;
            }
            return Ok(LadFit {
                beta: v.beta,
                residuals: v.resid,
                pivots,
                optimal: violation <= OPT_TOL,
                violation,
            });
        }

        // edge direction: basis row j leaves zero on the side that lowers the objective
        let s = -uj.signum();
        let d = v.binv.column(j) * s;
        let a = x * &d;
        let leaving = v.basis[j];
        let mut slope = v.w[leaving] * (1.0 - uj.abs());
        events.clear();
        for i in 0..n {
            if v.in_basis[i] || v.w[i] == 0.0 || a[i] == 0.0 {
                continue;
            }
            let r = v.resid[i];
            if r == 0.0 {
                events.push((0.0, v.w[i] * a[i].abs(), i));
                continue;
            }
            let t = r / a[i];
            if t > 0.0 {
                events.push((t, 2.0 * v.w[i] * a[i].abs(), i));
            }
        }
        events.sort_by(|e1, e2| e1.0.total_cmp(&e2.0));
        let mut entering = None;
        for &(t, inc, i) in &events {
            slope += inc;
            if slope >= 0.0 {
                entering = Some((t, i));
                break;
            }
        }
        let Some((t, i_in)) = entering else {
            return Err(Error::RankDeficient { rank: p - 1, p });
        };

        v.beta.axpy(t, &d, 1.0);
        v.resid.axpy(-t, &a, 1.0);
        v.resid[i_in] = 0.0;
        // Sherman-Morrison for replacing basis row j by X_{i_in}
        let col = v.binv.column(j).into_owned();
        let denom = a[i_in] * s;
        let delta = (x.row(i_in) - x.row(leaving)).transpose();
        let row = v.binv.tr_mul(&delta);
        v.binv.ger(-1.0 / denom, &col, &row, 1.0);
        v.basis[j] = i_in;
        v.in_basis[leaving] = false;
        v.in_basis[i_in] = true;
        v.sync_gradient();
        pivots += 1;
        since_refresh += 1;
        if since_refresh >= REFRESH_EVERY {
            if !v.refresh() {
                return Err(Error::RankDeficient { rank: p - 1, p });
            }
            since_refresh = 0;
        }
    }
}
