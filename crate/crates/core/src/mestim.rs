//! M-estimation for the linear model `y = X beta + eps`.
//!
//! Least squares is solved directly from a column-pivoted QR factorization.
//! Other losses use a safeguarded Newton iteration: the Newton step on
//! `sum w_i rho(y_i - X_i'b)` is tried first and accepted under an Armijo
//! test, otherwise the iteratively reweighted least-squares step with weights
//! `psi(e)/e` is taken. The IRLS step minimizes a quadratic majorizer of the
//! objective, so every accepted iteration decreases it. The absolute loss is
//! fitted exactly by vertex descent (see `lad`), which also supplies the
//! starting point for its smoothed variants.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lad;
use crate::linalg::{GramWorkspace, LsFactor};
use crate::loss::Loss;
use crate::stats;

/// Simulation bookkeeping carried alongside a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub beta: Vec<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub truth: Option<Truth>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let (n, p) = x.shape();
        if p == 0 {
            return Err(Error::InvalidInput("design has no columns".into()));
        }
        if n <= p {
            return Err(Error::InvalidInput(format!(
                "need more observations than predictors (n = {n}, p = {p})"
            )));
        }
        if y.len() != n {
            return Err(Error::InvalidInput(format!(
                "response has length {} but design has {n} rows",
                y.len()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("data contain non-finite values".into()));
        }
        Ok(Dataset { x, y, truth: None })
    }

    /// Reads headerless CSV rows `x_1, ..., x_p, y` (the response is the last column).
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(input);
        let mut values = Vec::new();
        let mut width = None;
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
            if rec.iter().all(|f| f.is_empty()) {
                continue;
            }
            if *width.get_or_insert(rec.len()) != rec.len() {
                return Err(Error::InvalidInput(format!("row {} has {} fields, expected {}", line + 1, rec.len(), width.unwrap())));
            }
            for f in rec.iter() {
                let v: f64 = f
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("row {}: '{f}' is not a number", line + 1)))?;
                values.push(v);
            }
        }
        let width = width.ok_or_else(|| Error::InvalidInput("data file is empty".into()))?;
        if width < 2 {
            return Err(Error::InvalidInput("need at least one predictor column and a response".into()));
        }
        let n = values.len() / width;
        let all = DMatrix::from_row_slice(n, width, &values);
        let x = all.columns(0, width - 1).into_owned();
        let y = all.column(width - 1).into_owned();
        Dataset::new(x, y)
    }

    /// Writes the rows in the format read by [`Dataset::read_csv`], with
    /// round-trip exact number formatting.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut row: Vec<String> = Vec::with_capacity(self.p() + 1);
        for i in 0..self.n() {
            row.clear();
            row.extend(self.x.row(i).iter().map(|v| v.to_string()));
            row.push(self.y[i].to_string());
            w.write_record(&row).map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn with_truth(mut self, beta: Vec<f64>, sigma: f64) -> Self {
        self.truth = Some(Truth { beta, sigma });
        self
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn kappa(&self) -> f64 {
        self.p() as f64 / self.n() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Relative coefficient change, measured as `|db|_inf / (1 + |b|_inf)`.
    pub beta_tol: f64,
    /// Objective decrease relative to `1 + objective`.
    pub objective_tol: f64,
    /// First-order condition `|sum w psi(e_i) X_i|_inf <= gradient_tol * scale`.
    pub gradient_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 500,
            beta_tol: 1e-10,
            objective_tol: 1e-12,
            gradient_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub beta_hat: DVector<f64>,
    pub residuals: DVector<f64>,
    pub loss: Loss,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
}

impl FitResult {
    /// `sum rho(e_i)` under the fitted loss.
    pub fn objective(&self) -> f64 {
        self.residuals.iter().map(|&e| self.loss.rho(e)).sum()
    }

    /// Turns a non-converged fit into [`Error::NonConvergence`].
    pub fn ensure_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NonConvergence {
                iterations: self.iterations,
                residual: self.gradient_norm,
            })
        }
    }
}

/// Fits `loss` to `ds` with default options.
pub fn fit(ds: &Dataset, loss: Loss) -> Result<FitResult> {
    fit_with(ds, loss, FitOptions::default())
}

pub fn fit_with(ds: &Dataset, loss: Loss, opts: FitOptions) -> Result<FitResult> {
    Solver::new(opts).fit(&ds.x, &ds.y, None, loss, None)
}

/// Minimizes `sum w_i rho(y_i - X_i'b)`; rows with zero weight drop out.
pub fn fit_weighted(ds: &Dataset, weights: &[f64], loss: Loss) -> Result<FitResult> {
    Solver::new(FitOptions::default()).fit(&ds.x, &ds.y, Some(weights), loss, None)
}

/// Reusable solver state. One per worker thread avoids reallocating the
/// Gram buffers for every refit.
#[derive(Debug, Clone)]
pub struct Solver {
    pub opts: FitOptions,
    ws: GramWorkspace,
    d: Vec<f64>,
    psi: DVector<f64>,
}

impl Solver {
    pub fn new(opts: FitOptions) -> Self {
        Solver {
            opts,
            ws: GramWorkspace::new(0, 0),
            d: Vec::new(),
            psi: DVector::zeros(0),
        }
    }

    pub fn fit(
        &mut self,
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        weights: Option<&[f64]>,
        loss: Loss,
        start: Option<&DVector<f64>>,
    ) -> Result<FitResult> {
        let (n, p) = x.shape();
        if let Some(w) = weights {
            if w.len() != n || w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::InvalidInput(
                    "weights must be finite, nonnegative and one per row".into(),
                ));
            }
        }
        if loss.is_quadratic() {
            let beta = self.least_squares(x, y, weights)?;
            let residuals = y - x * &beta;
            let g = weighted_gradient(x, &residuals, weights, &loss);
            return Ok(FitResult {
                beta_hat: beta,
                residuals,
                loss,
                iterations: 1,
                converged: true,
                gradient_norm: g.amax(),
            });
        }
        let beta = match start {
            Some(b) if b.len() == p => b.clone(),
            _ => {
                let ones;
                let w = match weights {
                    Some(w) => w,
                    None => {
                        ones = vec![1.0; n];
                        &ones
                    }
                };
                self.weighted_solve(x, y, w)?
            }
        };
        match loss {
            Loss::AbsoluteError => self.absolute(x, y, weights, &beta),
            Loss::SmoothedAbsolute { .. } => {
                // the smoothed optimum sits next to an absolute-loss vertex,
                // where the Newton Hessian is nonsingular
                let vertex = lad::lad(x, y, weights, &beta, self.lad_pivot_limit(n))?;
                self.robust(x, y, weights, loss, vertex.beta)
            }
            _ => self.robust(x, y, weights, loss, beta),
        }
    }

    fn lad_pivot_limit(&self, n: usize) -> usize {
        self.opts.max_iter.max(20 * n)
    }

    fn absolute(
        &mut self,
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        weights: Option<&[f64]>,
        start: &DVector<f64>,
    ) -> Result<FitResult> {
        let fit = lad::lad(x, y, weights, start, self.lad_pivot_limit(x.nrows()))?;
        if !fit.optimal {
            log::warn!("l1 fit stopped after {} pivots (violation {:.3e})", fit.pivots, fit.violation);
        }
        Ok(FitResult {
            beta_hat: fit.beta,
            residuals: fit.residuals,
            loss: Loss::AbsoluteError,
            iterations: fit.pivots,
            converged: fit.optimal,
            gradient_norm: fit.violation,
        })
    }

    fn least_squares(
        &mut self,
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        weights: Option<&[f64]>,
    ) -> Result<DVector<f64>> {
        match weights {
            None => Ok(LsFactor::new(x)?.solve(y)),
            Some(w) => self.weighted_solve(x, y, w),
        }
    }

    /// Solves `X'DX b = X'Dy`, falling back to QR on `sqrt(D) X` when the
    /// Gram matrix is too ill conditioned for Cholesky.
    fn weighted_solve(
        &mut self,
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        d: &[f64],
    ) -> Result<DVector<f64>> {
        let dy = DVector::from_iterator(y.len(), y.iter().zip(d).map(|(a, b)| a * b));
        if let Some(chol) = self.ws.factor(x, d) {
            return Ok(chol.solve(&x.tr_mul(&dy)));
        }
        let (n, p) = x.shape();
        let s: Vec<f64> = d.iter().map(|v| v.sqrt()).collect();
        let xs = DMatrix::from_fn(n, p, |i, j| x[(i, j)] * s[i]);
        let ys = DVector::from_fn(n, |i, _| y[i] * s[i]);
        Ok(LsFactor::new(&xs)?.solve(&ys))
    }

    fn robust(
        &mut self,
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        weights: Option<&[f64]>,
        loss: Loss,
        mut beta: DVector<f64>,
    ) -> Result<FitResult> {
        let n = x.nrows();
        let work = loss.solver_loss();
        let w = |i: usize| weights.map_or(1.0, |w| w[i]);
        let objective = |e: &DVector<f64>| -> f64 {
            e.iter().enumerate().map(|(i, &r)| w(i) * work.rho(r)).sum()
        };

        let mut resid = y - x * &beta;
        let mut f = objective(&resid);
        let mut iterations = 0;
        let mut converged = false;
        let mut gradient_norm;
        self.d.resize(n, 0.0);
        self.psi = DVector::zeros(n);

        loop {
            let mut scale = 0.0;
            for i in 0..n {
                let v = w(i) * work.psi(resid[i]);
                self.psi[i] = v;
                scale += v.abs() * x.row(i).amax();
            }
            let g = x.tr_mul(&self.psi);
            gradient_norm = g.amax();
            if gradient_norm <= self.opts.gradient_tol * scale {
                converged = true;
                break;
            }
            if iterations >= self.opts.max_iter {
                break;
            }
            iterations += 1;

            let (new_beta, new_resid, new_f) = match self.newton_step(x, y, &work, weights, &beta, &resid, &g, f) {
                Some(step) => step,
                None => {
                    for i in 0..n {
                        self.d[i] = w(i) * work.irls_weight(resid[i]);
                    }
                    let d = std::mem::take(&mut self.d);
                    let solved = self.weighted_solve(x, y, &d);
                    self.d = d;
                    let nb = solved?;
                    let nr = y - x * &nb;
                    let nf = objective(&nr);
                    (nb, nr, nf)
                }
            };
            if !(new_f <= f) {
                // rounding noise at the optimum; keep the better point
                converged = (f - new_f).abs() <= self.opts.objective_tol * (1.0 + f.abs());
                break;
            }
            let step = (&new_beta - &beta).amax();
            let rel = step / (1.0 + new_beta.amax());
            let decrease = f - new_f;
            beta = new_beta;
            resid = new_resid;
            f = new_f;
            if rel < self.opts.beta_tol && decrease <= self.opts.objective_tol * (1.0 + f.abs()) {
                converged = true;
                break;
            }
        }
        if !converged {
            log::warn!(
                "{loss} fit stopped after {iterations} iterations (gradient {gradient_norm:.3e})"
            );
        }
        Ok(FitResult {
            beta_hat: beta,
            residuals: resid,
            loss,
            iterations,
            converged,
            gradient_norm,
        })
    }

    /// Newton step with Armijo backtracking; `None` when the Hessian is
    /// singular or no sufficient decrease is found.
    #[allow(clippy::too_many_arguments)]
    fn newton_step(
        &mut self,
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        loss: &Loss,
        weights: Option<&[f64]>,
        beta: &DVector<f64>,
        resid: &DVector<f64>,
        g: &DVector<f64>,
        f: f64,
    ) -> Option<(DVector<f64>, DVector<f64>, f64)> {
        let n = x.nrows();
        let p = x.ncols();
        let mut active = 0;
        for i in 0..n {
            let d = weights.map_or(1.0, |w| w[i]) * loss.psi_prime(resid[i]);
            if d > 0.0 {
                active += 1;
            }
            self.d[i] = d;
        }
        if active < p {
            return None;
        }
        let d = std::mem::take(&mut self.d);
        let chol = self.ws.factor(x, &d);
        self.d = d;
        let dir = chol?.solve(g);
        let slope = dir.dot(g);
        if !(slope > 0.0) {
            return None;
        }
        let xd = x * &dir;
        let mut t = 1.0;
        for _ in 0..12 {
            let nr = resid - &xd * t;
            let nf: f64 = nr
                .iter()
                .enumerate()
                .map(|(i, &r)| weights.map_or(1.0, |w| w[i]) * loss.rho(r))
                .sum();
            if nf <= f - 1e-4 * t * slope {
                let nb = beta + &dir * t;
                // recompute residuals from scratch to avoid drift
                let nr = y - x * &nb;
                let nf: f64 = nr
                    .iter()
                    .enumerate()
                    .map(|(i, &r)| weights.map_or(1.0, |w| w[i]) * loss.rho(r))
                    .sum();
                return Some((nb, nr, nf));
            }
            t *= 0.5;
        }
        None
    }
}

fn weighted_gradient(
    x: &DMatrix<f64>,
    resid: &DVector<f64>,
    weights: Option<&[f64]>,
    loss: &Loss,
) -> DVector<f64> {
    let u = DVector::from_fn(resid.len(), |i, _| {
        weights.map_or(1.0, |w| w[i]) * loss.psi(resid[i])
    });
    x.tr_mul(&u)
}

/// Leverages `h_i = [X(X'X)^{-1}X']_ii`, computed from the QR factor.
pub fn hat_diagonal(ds: &Dataset) -> Result<DVector<f64>> {
    Ok(LsFactor::new(&ds.x)?.hat_diagonal())
}

/// `sum e_i^2 / (n - p)` from the least-squares residuals, whatever loss the
/// study itself uses.
pub fn sigma_hat_ls(ds: &Dataset) -> Result<f64> {
    let f = LsFactor::new(&ds.x)?;
    Ok(sigma_sq_from_factor(ds, &f))
}

pub(crate) fn sigma_sq_from_factor(ds: &Dataset, f: &LsFactor) -> f64 {
    let e = &ds.y - &ds.x * f.solve(&ds.y);
    e.norm_squared() / (ds.n() - ds.p()) as f64
}

/// Leverage above which dropping a row loses rank.
const LEVERAGE_LIMIT: f64 = 1.0 - 1e-10;

/// Leave-one-out coefficient vectors. Least squares uses the rank-one
/// downdate `beta_(i) = beta - (X'X)^{-1} X_i e_i / (1 - h_i)`; other losses
/// refit with row `i` weighted zero, warm-started from the full fit.
pub fn loo_betas(ds: &Dataset, loss: Loss, full: &FitResult) -> Result<Vec<DVector<f64>>> {
    let n = ds.n();
    if n - 1 <= ds.p() {
        return Err(Error::InvalidInput(
            "leave-one-out fits need n - 1 > p".into(),
        ));
    }
    let factor = LsFactor::new(&ds.x)?;
    let h = factor.hat_diagonal();
    if let Some(i) = h.iter().position(|&v| v >= LEVERAGE_LIMIT) {
        log::debug!("row {i} has leverage {}", h[i]);
        return Err(Error::RankDeficient { rank: ds.p() - 1, p: ds.p() });
    }
    if loss.is_quadratic() {
        let infl = factor.influence();
        return Ok((0..n)
            .map(|i| &full.beta_hat - infl.column(i) * (full.residuals[i] / (1.0 - h[i])))
            .collect());
    }
    (0..n)
        .into_par_iter()
        .map_init(
            || (Solver::new(FitOptions::default()), vec![1.0; n]),
            |(solver, w), i| {
                w[i] = 0.0;
                let r = solver.fit(&ds.x, &ds.y, Some(w), loss, Some(&full.beta_hat));
                w[i] = 1.0;
                let r = r?;
                if !r.converged {
                    log::warn!("leave-one-out fit {i} did not converge");
                }
                Ok(r.beta_hat)
            },
        )
        .collect()
}

/// All `n` leave-one-out fits.
pub fn loo_fits(ds: &Dataset, loss: Loss) -> Result<Vec<FitResult>> {
    let full = fit(ds, loss)?;
    let betas = loo_betas(ds, loss, &full)?;
    let mut w = vec![1.0; ds.n()];
    Ok(betas
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            let residuals = &ds.y - &ds.x * &b;
            w[i] = 0.0;
            let gradient_norm = weighted_gradient(&ds.x, &residuals, Some(&w), &loss.solver_loss()).amax();
            w[i] = 1.0;
            FitResult {
                beta_hat: b,
                residuals,
                loss,
                iterations: 1,
                converged: true,
                gradient_norm,
            }
        })
        .collect())
}

/// Predicted errors `y_i - X_i' beta_(i)` and their rescaled version whose
/// sample variance equals the least-squares noise variance estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedErrors {
    pub values: DVector<f64>,
    pub standardized: DVector<f64>,
    pub sigma_hat_ls: f64,
}

impl PredictedErrors {
    /// Builds the standardized version from raw predicted errors.
    pub fn from_values(values: DVector<f64>, sigma_sq_ls: f64) -> Result<Self> {
        let var = stats::sample_variance(values.as_slice());
        if !(var > 0.0) {
            return Err(Error::DegenerateScale);
        }
        let standardized = &values * (sigma_sq_ls.sqrt() / var.sqrt());
        Ok(PredictedErrors { values, standardized, sigma_hat_ls: sigma_sq_ls.sqrt() })
    }

    /// Unbiased sample variance of the raw predicted errors.
    pub fn variance(&self) -> f64 {
        stats::sample_variance(self.values.as_slice())
    }
}

pub fn predicted_errors(ds: &Dataset, loss: Loss) -> Result<PredictedErrors> {
    let full = fit(ds, loss)?;
    predicted_errors_from_fit(ds, loss, &full)
}

pub fn predicted_errors_from_fit(ds: &Dataset, loss: Loss, full: &FitResult) -> Result<PredictedErrors> {
    FitContext::new(ds, loss, full.clone()).predicted_errors()
}

/// A fit together with its leave-one-out refits, computed on first use, so
/// that several procedures on the same data share one set of refits.
#[derive(Debug)]
pub struct FitContext<'a> {
    pub ds: &'a Dataset,
    pub loss: Loss,
    pub full: FitResult,
    loo: OnceLock<Vec<DVector<f64>>>,
}

impl<'a> FitContext<'a> {
    pub fn new(ds: &'a Dataset, loss: Loss, full: FitResult) -> Self {
        FitContext { ds, loss, full, loo: OnceLock::new() }
    }

    pub fn fit(ds: &'a Dataset, loss: Loss) -> Result<Self> {
        Ok(FitContext::new(ds, loss, fit(ds, loss)?))
    }

    /// Leave-one-out coefficient vectors.
    pub fn loo_betas(&self) -> Result<&[DVector<f64>]> {
        if let Some(b) = self.loo.get() {
            return Ok(b);
        }
        let betas = loo_betas(self.ds, self.loss, &self.full)?;
        Ok(self.loo.get_or_init(|| betas))
    }

    pub fn predicted_errors(&self) -> Result<PredictedErrors> {
        let ds = self.ds;
        let factor = LsFactor::new(&ds.x)?;
        let sigma_sq = sigma_sq_from_factor(ds, &factor);
        let values = if self.loss.is_quadratic() {
            let h = factor.hat_diagonal();
            if h.iter().any(|&v| v >= LEVERAGE_LIMIT) {
                return Err(Error::RankDeficient { rank: ds.p() - 1, p: ds.p() });
            }
            DVector::from_fn(ds.n(), |i, _| self.full.residuals[i] / (1.0 - h[i]))
        } else {
            let betas = self.loo_betas()?;
            DVector::from_fn(ds.n(), |i, _| ds.y[i] - ds.x.row(i).dot(&betas[i].transpose()))
        };
        PredictedErrors::from_values(values, sigma_sq)
    }
}
