//! Limiting theory as `p/n -> kappa`: the expected weighted-bootstrap
//! variance, weight calibration, jackknife corrections, the risk system for
//! M-estimators and the confidence interval built on it.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laws::ErrorLaw;
use crate::linalg::{checked_cholesky, GramWorkspace, LsFactor};
use crate::loss::Loss;
use crate::mestim::{self, Dataset, FitResult};
use crate::resample::{normal_ci, WeightLaw};
use crate::rng;
use crate::stats;

/// Upper end of the search interval for `c`.
pub const C_MAX: f64 = 1e6;

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa > 0.0 && kappa < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("kappa must lie in (0, 1), got {kappa}")))
    }
}

/// Bisection for a decreasing function on `[lo, hi]`, stopping when the
/// bracket is below `rel_tol` relative width.
fn bisect_decreasing(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, rel_tol: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= rel_tol * hi.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// The `c > 0` with `E[1/(1 + cW)] = 1 - kappa`.
pub fn solve_c(law: &WeightLaw, kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    law.validate()?;
    let target = 1.0 - kappa;
    let g = |c: f64| law.expectation(|w| 1.0 / (1.0 + c * w)) - target;
    if g(C_MAX) > 0.0 {
        return Err(Error::NoBracket { lo: 0.0, hi: C_MAX });
    }
    Ok(bisect_decreasing(g, 0.0, C_MAX, 1e-15))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootVarPrediction {
    pub kappa: f64,
    pub weight_law: WeightLaw,
    pub c: f64,
    /// `sigma^2 [kappa / (1 - kappa - E[1/(1+cW)^2]) - 1/(1 - kappa)]`.
    pub expected_boot_var_scaled: f64,
    /// The bracket relative to the true scaled variance
    /// `sigma^2 kappa / (1 - kappa)`.
    pub overestimation_factor: f64,
}

/// Expected bootstrap variance of a unit contrast for least squares with a
/// Gaussian design, scaled by `p / v'Sigma^{-1}v`.
pub fn boot_var_prediction(law: &WeightLaw, kappa: f64, sigma_eps: f64) -> Result<BootVarPrediction> {
    let c = solve_c(law, kappa)?;
    let second = law.expectation(|w| (1.0 + c * w).powi(-2));
    let s2 = sigma_eps * sigma_eps;
    let denom = 1.0 - kappa - second;
    let bracket = if denom > 0.0 { kappa / denom - 1.0 / (1.0 - kappa) } else { 0.0 };
    // Jensen gives a nonnegative bracket; rounding can leave a tiny negative
    let bracket = bracket.max(0.0);
    Ok(BootVarPrediction {
        kappa,
        weight_law: law.clone(),
        c,
        expected_boot_var_scaled: s2 * bracket,
        overestimation_factor: bracket * (1.0 - kappa) / kappa,
    })
}

/// Lower and upper ends of the accepted overestimation factor.
pub const CALIBRATION_BAND: (f64, f64) = (0.99, 1.01);

/// Mixture parameter `alpha` for which Poisson mixture weights
/// `1 - alpha + alpha Poisson(1)` give an unbiased bootstrap variance at
/// `kappa`, found by dichotomy from 0.95.
pub fn calibrate_alpha(kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    let factor = |alpha: f64| -> Result<f64> {
        Ok(boot_var_prediction(&WeightLaw::PoissonMixture { alpha }, kappa, 1.0)?.overestimation_factor)
    };
    let (band_lo, band_hi) = CALIBRATION_BAND;
    if factor(1.0)? < band_lo {
        return Err(Error::NoSolution { kappa });
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut alpha = 0.95;
    for _ in 0..60 {
        let f = factor(alpha)?;
        if (band_lo..=band_hi).contains(&f) {
            return Ok(alpha);
        }
        if f > band_hi {
            hi = alpha;
        } else {
            lo = alpha;
        }
        alpha = 0.5 * (lo + hi);
    }
    Err(Error::NoSolution { kappa })
}

/// Asymptotic ratio of the jackknife variance to the true variance for
/// least squares, `1 / (1 - kappa)`.
pub fn jackknife_factor(kappa: f64) -> f64 {
    1.0 / (1.0 - kappa)
}

/// `(tr(S^-2)/p) / (tr(S^-1)/p)^2` with `S = (1/n) sum psi'(e_i) X_i X_i'`.
pub fn gamma_hat(ds: &Dataset, loss: Loss) -> Result<f64> {
    let full = mestim::fit(ds, loss)?;
    gamma_hat_from_fit(ds, &full)
}

pub fn gamma_hat_from_fit(ds: &Dataset, full: &FitResult) -> Result<f64> {
    let (n, p) = (ds.n(), ds.p());
    let loss = full.loss;
    let d: Vec<f64> = full.residuals.iter().map(|&e| loss.psi_prime(e) / n as f64).collect();
    // the indicator convention for L1 only charges interpolated points, of
    // which an exact fit has at most p
    let active = d.iter().filter(|&&v| v > 0.0).count();
    if active <= p {
        return Err(Error::SingularCurvature { ratio: 0.0 });
    }
    let mut ws = GramWorkspace::new(n, p);
    let gram = ws.gram(&ds.x, &d).clone();
    gamma_from_matrix(gram)
}

/// `(tr(S^-2)/p) / (tr(S^-1)/p)^2` for a symmetric positive definite `S`.
pub fn gamma_from_matrix(s: nalgebra::DMatrix<f64>) -> Result<f64> {
    let p = s.nrows() as f64;
    let diag_ratio = {
        let d = s.diagonal();
        let hi = d.iter().cloned().fold(0.0, f64::max);
        let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
        if hi > 0.0 { lo / hi } else { 0.0 }
    };
    let chol = checked_cholesky(s).ok_or(Error::SingularCurvature { ratio: diag_ratio })?;
    let inv = chol.inverse();
    let t1 = inv.trace() / p;
    let t2 = inv.norm_squared() / p;
    Ok(t2 / (t1 * t1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSystemSolution {
    pub c: f64,
    pub r: f64,
    pub kappa: f64,
    /// `E[prox'] - (1 - kappa)` and `kappa r^2 - E[(z - prox(z))^2]`.
    pub residual_norms: [f64; 2],
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskOptions {
    pub mc_size: usize,
    pub seed: u64,
    /// Damping `theta` in `r <- (1 - theta) r + theta r_new`.
    pub damping: f64,
    pub max_iter: usize,
    /// Relative change in `r` treated as converged.
    pub tol: f64,
}

impl Default for RiskOptions {
    fn default() -> Self {
        RiskOptions { mc_size: 1_000_000, seed: 0x5eed, damping: 0.5, max_iter: 200, tol: 1e-10 }
    }
}

/// Common random numbers for the risk system: stratified error draws and
/// stratified Gaussian draws in random pairing, each pair used with both
/// signs of the Gaussian.
struct RiskSample {
    eps: Vec<f64>,
    z: Vec<f64>,
}

const CHUNK: usize = 1 << 14;

impl RiskSample {
    fn new(law: &ErrorLaw, size: usize, seed: u64) -> Self {
        let half = size.div_ceil(2).max(1);
        let mut rng = rng::stream(seed, rng::tag("risk-system"), 0);
        let strata = |rng: &mut rng::StreamRng, k: usize| (k as f64 + rng.random::<f64>()) / half as f64;
        let eps: Vec<f64> = (0..half)
            .map(|k| {
                let u = strata(&mut rng, k);
                law.quantile(u).unwrap_or_else(|| law.sample(&mut rng))
            })
            .collect();
        let mut z: Vec<f64> = (0..half).map(|k| stats::normal_quantile(strata(&mut rng, k))).collect();
        z.shuffle(&mut rng);
        RiskSample { eps, z }
    }

    /// `E[f(eps + r Z)]` with a chunked reduction whose result does not
    /// depend on the thread count.
    fn mean(&self, r: f64, f: impl Fn(f64) -> f64 + Sync) -> f64 {
        let partial: Vec<f64> = self
            .eps
            .par_chunks(CHUNK)
            .zip(self.z.par_chunks(CHUNK))
            .map(|(e, z)| e.iter().zip(z).map(|(e, z)| f(e + r * z) + f(e - r * z)).sum::<f64>())
            .collect();
        partial.iter().sum::<f64>() / (2 * self.eps.len()) as f64
    }
}

/// Solves for `(c, r)` in
/// `E[prox(c rho)'(z)] = 1 - kappa`, `kappa r^2 = E[(z - prox(c rho)(z))^2]`,
/// `z = eps + r Z`, by damped fixed-point iteration on `r` with an inner
/// bisection for `c`, accelerated by Aitken extrapolation.
pub fn solve_risk_system(loss: Loss, law: &ErrorLaw, kappa: f64, opts: RiskOptions) -> Result<RiskSystemSolution> {
    check_kappa(kappa)?;
    law.validate()?;
    if opts.mc_size < 2 {
        return Err(Error::InvalidInput("Monte Carlo size must be at least 2".into()));
    }
    let sample = RiskSample::new(law, opts.mc_size, opts.seed);
    let target = 1.0 - kappa;

    let solve_c_at = |r: f64| -> Result<f64> {
        let g = |c: f64| sample.mean(r, |z| loss.prox_derivative(c, z)) - target;
        let mut hi = 1.0;
        while g(hi) > 0.0 {
            hi *= 4.0;
            if hi > C_MAX {
                return Err(Error::NoBracket { lo: 0.0, hi: C_MAX });
            }
        }
        Ok(bisect_decreasing(g, 0.0, hi, 1e-13))
    };
    let residual_sq = |c: f64, r: f64| sample.mean(r, |z| (z - loss.prox(c, z)).powi(2));
    let update = |r: f64| -> Result<(f64, f64)> {
        let c = solve_c_at(r)?;
        Ok((c, (residual_sq(c, r) / kappa).sqrt()))
    };

    let var = law.variance();
    if var == 0.0 {
        let c = solve_c_at(0.0)?;
        return Ok(RiskSystemSolution { c, r: 0.0, kappa, residual_norms: [0.0, 0.0], iterations: 0 });
    }
    // least-squares risk as the starting point
    let mut r = (var * kappa / (1.0 - kappa)).sqrt();
    let theta = opts.damping;
    let mut history: Vec<f64> = Vec::with_capacity(3);
    let mut last = (f64::NAN, f64::NAN);
    for it in 1..=opts.max_iter {
        let (c, r_new) = update(r)?;
        last = (c, r_new);
        if (r_new - r).abs() <= opts.tol * (1.0 + r) {
            let r = r_new;
            let c = solve_c_at(r)?;
            let res1 = sample.mean(r, |z| loss.prox_derivative(c, z)) - target;
            let res2 = kappa * r * r - residual_sq(c, r);
            return Ok(RiskSystemSolution { c, r, kappa, residual_norms: [res1, res2], iterations: it });
        }
        let mut next = (1.0 - theta) * r + theta * r_new;
        history.push(next);
        if history.len() == 3 {
            let (a, b, d) = (history[0], history[1], history[2]);
            let denom = (d - b) - (b - a);
            if denom.abs() > 1e-300 {
                let acc = d - (d - b).powi(2) / denom;
                if acc.is_finite() && acc > 0.0 {
                    next = acc;
                }
            }
            history.clear();
        }
        r = next;
    }
    let res2 = kappa * last.1 * last.1 - residual_sq(last.0, last.1);
    Err(Error::NonConvergence { iterations: opts.max_iter, residual: res2.abs() })
}

/// `(1 - p/n) n v'(X'X)^{-1} v`, an estimate of `v'Sigma^{-1}v`.
pub fn sigma_contrast_estimator(ds: &Dataset, v: &DVector<f64>) -> Result<f64> {
    if v.len() != ds.p() {
        return Err(Error::InvalidInput("contrast length must equal p".into()));
    }
    let f = LsFactor::new(&ds.x)?;
    let inv = f.xtx_inverse();
    let q = (v.transpose() * inv * v)[0];
    Ok((1.0 - ds.kappa()) * ds.n() as f64 * q)
}

/// `v'beta_hat -/+ z r_hat sqrt((1 - p/n) v'Sigma_hat^{-1} v) / sqrt(p)` with
/// `Sigma_hat = X'X/n`.
pub fn asymptotic_ci(ds: &Dataset, loss: Loss, v: &DVector<f64>, r_hat: f64, level: f64) -> Result<(f64, f64)> {
    let full = mestim::fit(ds, loss)?;
    asymptotic_ci_from_fit(ds, &full, v, r_hat, level)
}

pub fn asymptotic_ci_from_fit(
    ds: &Dataset,
    full: &FitResult,
    v: &DVector<f64>,
    r_hat: f64,
    level: f64,
) -> Result<(f64, f64)> {
    if !(r_hat >= 0.0 && r_hat.is_finite()) {
        return Err(Error::InvalidInput(format!("r_hat must be nonnegative, got {r_hat}")));
    }
    let s = sigma_contrast_estimator(ds, v)?;
    let point = v.dot(&full.beta_hat);
    let variance = r_hat * r_hat * s / ds.p() as f64;
    Ok(normal_ci(point, variance, level))
}

/// `sqrt(max(0, var(e~) - sigma_hat_ls^2))`, the predicted-error estimate of
/// the coefficient risk.
pub fn r_hat_from_predicted(ds: &Dataset, loss: Loss) -> Result<f64> {
    let pe = mestim::predicted_errors(ds, loss)?;
    Ok((pe.variance() - pe.sigma_hat_ls.powi(2)).max(0.0).sqrt())
}

/// Flat record for reporting theory results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryRecord {
    pub kappa: f64,
    pub loss: Option<String>,
    pub law: Option<String>,
    pub c: Option<f64>,
    pub r: Option<f64>,
    pub factor: Option<f64>,
}

impl From<&BootVarPrediction> for TheoryRecord {
    fn from(p: &BootVarPrediction) -> Self {
        TheoryRecord {
            kappa: p.kappa,
            loss: Some(Loss::SquaredError.to_string()),
            law: Some(p.weight_law.to_string()),
            c: Some(p.c),
            r: None,
            factor: Some(p.overestimation_factor),
        }
    }
}

impl TheoryRecord {
    pub fn from_risk(sol: &RiskSystemSolution, loss: Loss, law: &ErrorLaw) -> Self {
        TheoryRecord {
            kappa: sol.kappa,
            loss: Some(loss.to_string()),
            law: Some(law.to_string()),
            c: Some(sol.c),
            r: Some(sol.r),
            factor: None,
        }
    }
}
