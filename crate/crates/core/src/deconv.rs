//! Residual bootstrap from an error law recovered by Gaussian deconvolution
//! of the leave-one-out predicted errors.
//!
//! Predicted errors behave like `eps_i + Z_i` with `Z_i` Gaussian. The error
//! cdf is estimated with a Fourier deconvolution estimator whose kernel has
//! characteristic function `(1 - t^2)^3` on `[-1, 1]`, monotonized, and then
//! sampled by inverse-cdf draws that are standardized to the least-squares
//! noise variance.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::Loss;
use crate::mestim::{Dataset, FitContext, PredictedErrors};
use crate::resample::{self, BootstrapOutcome, ReplicateStyle, ResamplingPlan, Scheme};
use crate::rng::{self, StreamRng};
use crate::stats;

/// Cdf values at or beyond these levels are treated as the tails.
pub const TAIL_CLAMP: f64 = 1e-3;
/// Minimum number of grid points.
pub const MIN_GRID: usize = 512;
/// Largest grid spacing, in the units of the predicted errors.
pub const GRID_SPACING: f64 = 0.01;
/// Largest exponent `sigma^2 t^2 / 2` allowed in the Gaussian divisor.
pub const MAX_EXPONENT: f64 = 700.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeconvolvedCdf {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub bandwidth: f64,
    pub noise_sd: f64,
}

impl DeconvolvedCdf {
    /// Mean and variance of the piecewise-uniform law with this cdf.
    pub fn moments(&self) -> (f64, f64) {
        let (mut m1, mut m2) = (0.0, 0.0);
        for k in 1..self.grid.len() {
            let mass = self.values[k] - self.values[k - 1];
            let (a, b) = (self.grid[k - 1], self.grid[k]);
            m1 += mass * (a + b) / 2.0;
            m2 += mass * (a * a + a * b + b * b) / 3.0;
        }
        (m1, m2 - m1 * m1)
    }

    /// Linear interpolation of the cdf at `x`.
    pub fn eval(&self, x: f64) -> f64 {
        let g = &self.grid;
        if x <= g[0] {
            return self.values[0];
        }
        if x >= g[g.len() - 1] {
            return self.values[g.len() - 1];
        }
        let k = g.partition_point(|&v| v <= x);
        let t = (x - g[k - 1]) / (g[k] - g[k - 1]);
        self.values[k - 1] + t * (self.values[k] - self.values[k - 1])
    }

    /// Inverse cdf by linear interpolation between grid points.
    pub fn quantile(&self, u: f64) -> f64 {
        let v = &self.values;
        let k = v.partition_point(|&c| c < u);
        if k == 0 {
            return self.grid[0];
        }
        if k >= v.len() {
            return self.grid[v.len() - 1];
        }
        let span = v[k] - v[k - 1];
        let t = if span > 0.0 { (u - v[k - 1]) / span } else { 0.0 };
        self.grid[k - 1] + t * (self.grid[k] - self.grid[k - 1])
    }

    /// Writes `grid,value` rows with a header line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "grid,value")?;
        for (x, v) in self.grid.iter().zip(&self.values) {
            writeln!(out, "{x},{v}")?;
        }
        Ok(())
    }
}

/// Standard deviation of the Gaussian part of the predicted errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum NoiseSd {
    Estimate(f64),
    /// The predicted errors are no more variable than the least-squares
    /// noise estimate, so there is nothing to deconvolve.
    Fallback,
}

/// `sqrt(var(e~) - sigma_hat_ls^2)`, or [`NoiseSd::Fallback`] when the
/// difference is not positive.
pub fn estimate_noise_sd(pe: &PredictedErrors) -> NoiseSd {
    noise_sd_from(pe.variance(), pe.sigma_hat_ls * pe.sigma_hat_ls)
}

fn noise_sd_from(var_pred: f64, sigma_sq: f64) -> NoiseSd {
    let diff = var_pred - sigma_sq;
    if diff > 0.0 {
        NoiseSd::Estimate(diff.sqrt())
    } else {
        NoiseSd::Fallback
    }
}

/// Bandwidth `noise_sd / sqrt(log n)`.
pub fn default_bandwidth(noise_sd: f64, n: usize) -> f64 {
    noise_sd / (n.max(3) as f64).ln().sqrt()
}

/// Deconvolution cdf estimate of the error law from predicted errors with
/// Gaussian noise of standard deviation `noise_sd`.
pub fn deconvolve_cdf(
    pe: &PredictedErrors,
    noise_sd: f64,
    bandwidth: Option<f64>,
) -> Result<DeconvolvedCdf> {
    let values = pe.values.as_slice();
    deconvolve_values(values, &vec![noise_sd; values.len()], noise_sd, bandwidth)
}

/// As [`deconvolve_cdf`], with noise standard deviation `lambda_i * noise_sd`
/// for observation `i`.
pub fn deconvolve_cdf_elliptical(
    pe: &PredictedErrors,
    noise_sd: f64,
    scales: &EllipticalScales,
    bandwidth: Option<f64>,
) -> Result<DeconvolvedCdf> {
    let values = pe.values.as_slice();
    if scales.lambda_sq_hat.len() != values.len() {
        return Err(Error::InvalidInput("one scale per predicted error is required".into()));
    }
    let sds: Vec<f64> = scales.lambda_sq_hat.iter().map(|l| l.sqrt() * noise_sd).collect();
    deconvolve_values(values, &sds, noise_sd, bandwidth)
}

/// Deconvolution estimator on raw observations with per-observation noise
/// standard deviations.
pub fn deconvolve_values(
    obs: &[f64],
    noise_sds: &[f64],
    noise_sd: f64,
    bandwidth: Option<f64>,
) -> Result<DeconvolvedCdf> {
    let n = obs.len();
    if n < 2 {
        return Err(Error::InvalidInput("deconvolution needs at least two observations".into()));
    }
    if !(noise_sd > 0.0 && noise_sd.is_finite()) || noise_sds.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::InvalidInput(format!("noise sd must be positive, got {noise_sd}")));
    }
    let h = bandwidth.unwrap_or_else(|| default_bandwidth(noise_sd, n));
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidInput(format!("bandwidth must be positive, got {h}")));
    }
    let sd_max = noise_sds.iter().cloned().fold(0.0, f64::max);
    if sd_max * sd_max / (2.0 * h * h) > MAX_EXPONENT {
        return Err(Error::NumericalUnderflow {
            bandwidth: h,
            suggested: 1.01 * sd_max / (2.0 * MAX_EXPONENT).sqrt(),
        });
    }

    let center = stats::mean(obs);
    let y: Vec<f64> = obs.iter().map(|v| v - center).collect();
    let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::DegenerateCdf);
    }
    let points = MIN_GRID.max((range / GRID_SPACING).ceil() as usize + 1);
    let grid: Vec<f64> = (0..points).map(|k| lo + range * k as f64 / (points - 1) as f64).collect();

    // F(x) = 1/2 + (1/pi) int_0^{1/h} [sin(tx) A(t) - cos(tx) B(t)] / t dt with
    // A, B the kernel-weighted empirical cosine and sine transforms divided by
    // the Gaussian characteristic function
    let t_max = 1.0 / h;
    let reach = lo.abs().max(hi.abs());
    let intervals = {
        let cycles = t_max * reach / (2.0 * PI);
        let k = (cycles * 12.0).ceil() as usize;
        (k.clamp(256, 1_000_000) + 1) & !1
    };
    let dt = t_max / intervals as f64;
    let ts: Vec<f64> = (0..=intervals).map(|k| k as f64 * dt).collect();
    let mut a = vec![0.0; intervals + 1];
    let mut b = vec![0.0; intervals + 1];
    for (yj, sj) in y.iter().zip(noise_sds) {
        let half_var = sj * sj / 2.0;
        for_each_phase(*yj, dt, intervals, |k, s, c| {
            let boost = (half_var * ts[k] * ts[k]).exp();
            a[k] += c * boost;
            b[k] += s * boost;
        });
    }
    for k in 0..=intervals {
        a[k] /= n as f64;
        b[k] /= n as f64;
    }
    // Simpson weights times the kernel
    let q: Vec<f64> = ts
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let simpson = if k == 0 || k == intervals {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let kernel = (1.0 - (t * h).powi(2)).max(0.0).powi(3);
            simpson * dt / 3.0 * kernel
        })
        .collect();
    let ybar = stats::mean(&y);
    let raw: Vec<f64> = grid
        .iter()
        .map(|&x| {
            // the integrand tends to x - mean(y) as t -> 0
            let mut total = q[0] * (x - ybar);
            for_each_phase(x, dt, intervals, |k, s, c| {
                if k > 0 {
                    total += q[k] * (s * a[k] - c * b[k]) / ts[k];
                }
            });
            0.5 + total / PI
        })
        .collect();
    let grid: Vec<f64> = grid.iter().map(|x| x + center).collect();
    let mut cdf = monotonize_cdf(&grid, &raw)?;
    cdf.bandwidth = h;
    cdf.noise_sd = noise_sd;
    Ok(cdf)
}

/// Calls `f(k, sin(k dt x), cos(k dt x))` for `k = 0..=steps`, using the
/// angle-addition recurrence with periodic exact resynchronization.
fn for_each_phase(x: f64, dt: f64, steps: usize, mut f: impl FnMut(usize, f64, f64)) {
    let (sd, cd) = (dt * x).sin_cos();
    let (mut s, mut c) = (0.0f64, 1.0f64);
    for k in 0..=steps {
        if k % 256 == 0 {
            (s, c) = (k as f64 * dt * x).sin_cos();
        }
        f(k, s, c);
        (s, c) = (s * cd + c * sd, c * cd - s * sd);
    }
}

/// Turns raw cdf estimates into a proper cdf. Values up to the last grid
/// point at or below [`TAIL_CLAMP`] become 0, values from the first point at
/// or above `1 - TAIL_CLAMP` become 1, negative increments are dropped and
/// the cumulative sum is rescaled to run from 0 to 1. The steps repeat until
/// nothing changes, which makes the operation idempotent.
pub fn monotonize_cdf(grid: &[f64], raw: &[f64]) -> Result<DeconvolvedCdf> {
    if grid.len() != raw.len() || grid.len() < 2 {
        return Err(Error::InvalidInput("grid and values must match and have two or more points".into()));
    }
    if raw.iter().chain(grid).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("cdf values must be finite".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("grid must be strictly increasing".into()));
    }
    let mut values = raw.to_vec();
    for _ in 0..100 {
        let next = monotonize_once(&values)?;
        let same = next.iter().zip(&values).all(|(a, b)| a == b);
        values = next;
        if same {
            break;
        }
    }
    Ok(DeconvolvedCdf { grid: grid.to_vec(), values, bandwidth: 0.0, noise_sd: 0.0 })
}

fn monotonize_once(raw: &[f64]) -> Result<Vec<f64>> {
    let m = raw.len();
    let mut g = raw.to_vec();
    if let Some(k) = g.iter().rposition(|&v| v <= TAIL_CLAMP) {
        g[..=k].iter_mut().for_each(|v| *v = 0.0);
    }
    if let Some(k) = g.iter().position(|&v| v >= 1.0 - TAIL_CLAMP) {
        g[k..].iter_mut().for_each(|v| *v = 1.0);
    }
    let mut c = Vec::with_capacity(m);
    let mut acc = 0.0;
    for k in 0..m {
        let d = if k == 0 { g[0] } else { g[k] - g[k - 1] };
        acc += d.max(0.0);
        c.push(acc);
    }
    let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::DegenerateCdf);
    }
    let mut out: Vec<f64> = c.iter().map(|v| (v - lo) / (hi - lo)).collect();
    out[0] = 0.0;
    out[m - 1] = 1.0;
    Ok(out)
}

/// Draws from an estimated error law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GhatSample {
    pub draws: Vec<f64>,
    /// All raw draws coincided, so the draws are returned as zeros.
    pub degenerate: bool,
}

/// `m` inverse-cdf draws, centered and scaled to sample standard deviation
/// `sigma_target`.
pub fn sample_ghat(cdf: &DeconvolvedCdf, m: usize, sigma_target: f64, seed: u64) -> Result<GhatSample> {
    if m < 2 {
        return Err(Error::InvalidInput("at least two draws are required".into()));
    }
    if !(sigma_target > 0.0) {
        return Err(Error::InvalidInput(format!("target sd must be positive, got {sigma_target}")));
    }
    let mut rng = rng::stream(seed, rng::tag("ghat"), 0);
    let mut draws = vec![0.0; m];
    let degenerate = !fill_standardized(cdf, sigma_target, &mut rng, &mut draws);
    Ok(GhatSample { draws, degenerate })
}

/// Raw inverse-cdf draws without standardization.
pub fn raw_draws(cdf: &DeconvolvedCdf, rng: &mut StreamRng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = cdf.quantile(rng.random::<f64>());
    }
}

/// Fills `out` with standardized draws; returns false (and zeros) when the
/// raw draws have no spread.
fn fill_standardized(cdf: &DeconvolvedCdf, sigma: f64, rng: &mut StreamRng, out: &mut [f64]) -> bool {
    raw_draws(cdf, rng, out);
    let m = stats::mean(out);
    let sd = stats::sample_variance(out).sqrt();
    if !(sd > 0.0) {
        out.iter_mut().for_each(|v| *v = 0.0);
        return false;
    }
    let scale = sigma / sd;
    for v in out.iter_mut() {
        *v = (*v - m) * scale;
    }
    true
}

/// Squared row-norm ratios `||X_i||^2 / mean_j ||X_j||^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipticalScales {
    pub lambda_sq_hat: Vec<f64>,
}

pub fn estimate_lambda_sq(ds: &Dataset) -> Result<EllipticalScales> {
    let norms: Vec<f64> = ds.x.row_iter().map(|r| r.norm_squared()).collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::ZeroRow(i));
    }
    let mean = stats::mean(&norms);
    Ok(EllipticalScales { lambda_sq_hat: norms.iter().map(|v| v / mean).collect() })
}

/// Deconvolution residual bootstrap.
pub fn deconvolution_bootstrap(
    ds: &Dataset,
    loss: Loss,
    plan: &ResamplingPlan,
    seed: u64,
) -> Result<BootstrapOutcome> {
    deconvolution_bootstrap_in(&FitContext::fit(ds, loss)?, plan, seed)
}

/// Deconvolution bootstrap reusing the fit and leave-one-out refits in `ctx`.
pub fn deconvolution_bootstrap_in(ctx: &FitContext, plan: &ResamplingPlan, seed: u64) -> Result<BootstrapOutcome> {
    let (ds, loss, full) = (ctx.ds, ctx.loss, &ctx.full);
    if plan.scheme != Scheme::DeconvolutionResidual {
        return Err(Error::InvalidInput(format!("{} is not the deconvolution bootstrap", plan.scheme)));
    }
    let v = plan.contrast_vector(ds.p())?;
    let point = v.dot(&full.beta_hat);
    let pe = ctx.predicted_errors()?;
    let tag = rng::tag("deconv");
    let mut warnings = Vec::new();

    let noise_sd = match estimate_noise_sd(&pe) {
        NoiseSd::Estimate(s) => s,
        NoiseSd::Fallback => {
            warnings.push("predicted errors are not overdispersed; resampling them directly".into());
            let mut pool = pe.values.as_slice().to_vec();
            resample::center(&mut pool);
            let values = resample::resample_pool(ds, loss, full, plan, seed, tag, &pool)?;
            return resample::assemble(point, values, 0, plan.ci_level, warnings);
        }
    };
    let cdf = if plan.per_observation_noise {
        let scales = estimate_lambda_sq(ds)?;
        deconvolve_cdf_elliptical(&pe, noise_sd, &scales, plan.bandwidth)?
    } else {
        deconvolve_cdf(&pe, noise_sd, plan.bandwidth)?
    };
    let sigma = pe.sigma_hat_ls;
    let values = match plan.replicate_style {
        ReplicateStyle::Fresh => {
            resample::residual_replicates(ds, loss, full, plan, seed, tag, |rng, eps| {
                fill_standardized(&cdf, sigma, rng, eps);
            })?
        }
        ReplicateStyle::Frozen => {
            let mut rng = rng::stream(seed, rng::tag("deconv-frozen"), 0);
            let mut pool = vec![0.0; ds.n()];
            fill_standardized(&cdf, sigma, &mut rng, &mut pool);
            resample::resample_pool(ds, loss, full, plan, seed, tag, &pool)?
        }
    };
    resample::assemble(point, values, 0, plan.ci_level, warnings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_sd_arithmetic() {
        assert_eq!(noise_sd_from(2.0, 1.0), NoiseSd::Estimate(1.0));
        assert_eq!(noise_sd_from(1.0, 1.0), NoiseSd::Fallback);
    }

    #[test]
    fn hand_executed_monotonization() {
        let grid = [0.0, 1.0, 2.0, 3.0];
        let cdf = monotonize_cdf(&grid, &[0.2, 0.1, 0.5, 1.0]).unwrap();
        let want = [0.0, 0.0, 4.0 / 9.0, 1.0];
        for (a, b) in cdf.values.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{:?}", cdf.values);
        }
    }

    #[test]
    fn constant_values_are_degenerate() {
        let grid = [0.0, 1.0, 2.0];
        assert!(matches!(monotonize_cdf(&grid, &[0.5; 3]), Err(Error::DegenerateCdf)));
    }

    #[test]
    fn quantile_inverts_eval() {
        let cdf = monotonize_cdf(&[-1.0, 0.0, 2.0], &[0.0, 0.5, 1.0]).unwrap();
        for u in [0.1, 0.25, 0.5, 0.8] {
            assert!((cdf.eval(cdf.quantile(u)) - u).abs() < 1e-12);
        }
        let (m, v) = cdf.moments();
        // mixture of U(-1,0) and U(0,2) with equal weight
        assert!((m - 0.25).abs() < 1e-12);
        assert!((v - (0.5 * (1.0 / 3.0) + 0.5 * (4.0 / 3.0) - 0.0625)).abs() < 1e-12);
    }

    #[test]
    fn point_mass_draws_are_flagged() {
        let atom = DeconvolvedCdf { grid: vec![0.0, 0.0], values: vec![0.0, 1.0], bandwidth: 0.0, noise_sd: 0.0 };
        let s = sample_ghat(&atom, 10, 1.0, 4).unwrap();
        assert!(s.degenerate);
        assert!(s.draws.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardization_is_exact() {
        let cdf = monotonize_cdf(&[-2.0, 0.0, 1.0, 5.0], &[0.0, 0.3, 0.9, 1.0]).unwrap();
        let s = sample_ghat(&cdf, 500, 1.7, 9).unwrap();
        assert!(!s.degenerate);
        assert!(stats::mean(&s.draws).abs() < 1e-12);
        assert!((stats::sample_variance(&s.draws) - 1.7 * 1.7).abs() < 1e-10);
    }

    #[test]
    fn csv_output() {
        let cdf = monotonize_cdf(&[0.0, 1.0], &[0.0, 1.0]).unwrap();
        let mut buf = Vec::new();
        cdf.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "grid,value\n0,0\n1,1\n");
    }
}
