//! Residual, pairs and weighted bootstraps, the jackknife, and the
//! percentile / normal-theory intervals built from them.
//!
//! Replicate `b` of a scheme draws from the random stream keyed by
//! `(seed, scheme tag, b)`, so outcomes do not depend on the number of worker
//! threads and enlarging `B` leaves earlier replicates untouched.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::{Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::LsFactor;
use crate::loss::Loss;
use crate::mestim::{self, Dataset, FitContext, FitOptions, FitResult, Solver};
use crate::rng::{self, StreamRng};
use crate::stats;

/// Terms kept in Poisson series expectations.
pub const POISSON_TERMS: usize = 100;

/// Fraction of failed replicates above which a bootstrap is abandoned.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// Redraws allowed for a single replicate with a singular design.
pub const MAX_REDRAWS: usize = 100;

/// Distribution of the iid observation weights in a weighted bootstrap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightLaw {
    ConstantOne,
    PoissonOne,
    /// `W = 1 - alpha + alpha K` with `K ~ Poisson(1)`.
    PoissonMixture { alpha: f64 },
    EmpiricalTable { values: Vec<f64>, probabilities: Vec<f64> },
}

impl WeightLaw {
    pub fn mixture(alpha: f64) -> Result<Self> {
        let law = WeightLaw::PoissonMixture { alpha };
        law.validate()?;
        Ok(law)
    }

    pub fn table(values: Vec<f64>, probabilities: Vec<f64>) -> Result<Self> {
        let law = WeightLaw::EmpiricalTable { values, probabilities };
        law.validate()?;
        Ok(law)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            WeightLaw::ConstantOne | WeightLaw::PoissonOne => Ok(()),
            WeightLaw::PoissonMixture { alpha } => {
                if (0.0..=1.0).contains(alpha) {
                    Ok(())
                } else {
                    Err(Error::InvalidInput(format!(
                        "mixture parameter must lie in [0, 1] to keep weights nonnegative, got {alpha}"
                    )))
                }
            }
            WeightLaw::EmpiricalTable { values, probabilities } => {
                if values.is_empty() || values.len() != probabilities.len() {
                    return Err(Error::InvalidInput(
                        "weight table needs matching, nonempty value and probability lists".into(),
                    ));
                }
                if values.iter().chain(probabilities).any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::InvalidInput(
                        "weight table entries must be finite and nonnegative".into(),
                    ));
                }
                let total: f64 = probabilities.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidInput(format!(
                        "weight probabilities sum to {total}, not 1"
                    )));
                }
                let mean: f64 = values.iter().zip(probabilities).map(|(v, p)| v * p).sum();
                if (mean - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidInput(format!("weight table has mean {mean}, not 1")));
                }
                Ok(())
            }
        }
    }

    /// `E[f(W)]`, exact for finite laws and by the Poisson series truncated
    /// after [`POISSON_TERMS`] terms otherwise.
    pub fn expectation(&self, f: impl Fn(f64) -> f64) -> f64 {
        let poisson = |map: &dyn Fn(f64) -> f64| {
            let mut pk = (-1.0f64).exp();
            let mut total = 0.0;
            for k in 0..=POISSON_TERMS {
                if k > 0 {
                    pk /= k as f64;
                }
                total += pk * f(map(k as f64));
            }
            total
        };
        match self {
            WeightLaw::ConstantOne => f(1.0),
            WeightLaw::PoissonOne => poisson(&|k| k),
            WeightLaw::PoissonMixture { alpha } => poisson(&|k| 1.0 - alpha + alpha * k),
            WeightLaw::EmpiricalTable { values, probabilities } => {
                values.iter().zip(probabilities).map(|(&v, &p)| p * f(v)).sum()
            }
        }
    }

    /// Probability that a weight is zero.
    pub fn zero_probability(&self) -> f64 {
        self.expectation(|w| if w == 0.0 { 1.0 } else { 0.0 })
    }

    fn sampler(&self) -> WeightSampler {
        match self {
            WeightLaw::ConstantOne => WeightSampler::One,
            WeightLaw::PoissonOne => WeightSampler::Poisson(Poisson::new(1.0).unwrap(), 1.0, 0.0),
            WeightLaw::PoissonMixture { alpha } => {
                WeightSampler::Poisson(Poisson::new(1.0).unwrap(), *alpha, 1.0 - alpha)
            }
            WeightLaw::EmpiricalTable { values, probabilities } => WeightSampler::Table(
                values.clone(),
                WeightedIndex::new(probabilities).expect("validated probabilities"),
            ),
        }
    }
}

enum WeightSampler {
    One,
    /// `shift + scale * Poisson(1)`
    Poisson(Poisson<f64>, f64, f64),
    Table(Vec<f64>, WeightedIndex<f64>),
}

impl WeightSampler {
    fn draw(&self, rng: &mut StreamRng) -> f64 {
        match self {
            WeightSampler::One => 1.0,
            WeightSampler::Poisson(dist, scale, shift) => shift + scale * dist.sample(rng),
            WeightSampler::Table(values, index) => values[index.sample(rng)],
        }
    }
}

impl fmt::Display for WeightLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightLaw::ConstantOne => write!(f, "const1"),
            WeightLaw::PoissonOne => write!(f, "poisson1"),
            WeightLaw::PoissonMixture { alpha } => write!(f, "mixture:{alpha}"),
            WeightLaw::EmpiricalTable { values, .. } => write!(f, "table[{}]", values.len()),
        }
    }
}

/// Parses `const1`, `poisson1` and `mixture:<alpha>`.
impl FromStr for WeightLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "const1" | "constant" | "one" => Ok(WeightLaw::ConstantOne),
            "poisson1" | "poisson" => Ok(WeightLaw::PoissonOne),
            _ => match s.strip_prefix("mixture:") {
                Some(a) => {
                    let alpha = a
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidInput(format!("bad mixture parameter '{a}'")))?;
                    WeightLaw::mixture(alpha)
                }
                None => Err(Error::InvalidInput(format!("unknown weight law '{s}'"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheme {
    ResidualRaw,
    ResidualHatCorrected,
    ResidualMcKean,
    PredictedStandardized,
    DeconvolutionResidual,
    GaussianResidual,
    PairsMultinomial,
    WeightedIid { weights: WeightLaw },
}

impl Scheme {
    pub fn is_residual_family(&self) -> bool {
        !matches!(self, Scheme::PairsMultinomial | Scheme::WeightedIid { .. })
    }

    pub fn name(&self) -> String {
        self.to_string()
    }

    fn rng_tag(&self) -> u64 {
        rng::tag(&self.name())
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::ResidualRaw => write!(f, "residual_raw"),
            Scheme::ResidualHatCorrected => write!(f, "residual_hat"),
            Scheme::ResidualMcKean => write!(f, "residual_mckean"),
            Scheme::PredictedStandardized => write!(f, "predicted_std"),
            Scheme::DeconvolutionResidual => write!(f, "deconv"),
            Scheme::GaussianResidual => write!(f, "gaussian"),
            Scheme::PairsMultinomial => write!(f, "pairs"),
            Scheme::WeightedIid { weights } => write!(f, "weighted:{weights}"),
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Ok(match s.as_str() {
            "residual_raw" | "raw" => Scheme::ResidualRaw,
            "residual_hat" | "hat" => Scheme::ResidualHatCorrected,
            "residual_mckean" | "mckean" => Scheme::ResidualMcKean,
            "predicted_std" | "predicted" => Scheme::PredictedStandardized,
            "deconv" | "deconvolution" => Scheme::DeconvolutionResidual,
            "gaussian" | "normal" => Scheme::GaussianResidual,
            "pairs" => Scheme::PairsMultinomial,
            _ => match s.strip_prefix("weighted:") {
                Some(law) => Scheme::WeightedIid { weights: law.parse()? },
                None => return Err(Error::InvalidInput(format!("unknown scheme '{s}'"))),
            },
        })
    }
}

/// How the deconvolution bootstrap turns the estimated error law into draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicateStyle {
    /// New iid draws from the estimated law for every replicate.
    #[default]
    Fresh,
    /// One draw of size `n` from the estimated law, resampled with replacement.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResamplingPlan {
    pub scheme: Scheme,
    pub b: usize,
    /// Unit contrast `v`; `None` means the first coordinate vector.
    pub contrast: Option<Vec<f64>>,
    pub ci_level: f64,
    pub replicate_style: ReplicateStyle,
    /// Deconvolution bandwidth override.
    pub bandwidth: Option<f64>,
    /// Scale the deconvolution noise per observation by the estimated
    /// elliptical factors.
    pub per_observation_noise: bool,
    /// Solver settings for the replicate refits.
    pub fit_options: FitOptions,
}

impl ResamplingPlan {
    pub fn new(scheme: Scheme) -> Self {
        ResamplingPlan {
            scheme,
            b: 1000,
            contrast: None,
            ci_level: 0.95,
            replicate_style: ReplicateStyle::Fresh,
            bandwidth: None,
            per_observation_noise: false,
            fit_options: FitOptions::default(),
        }
    }

    pub fn with_b(mut self, b: usize) -> Self {
        self.b = b;
        self
    }

    pub fn with_contrast(mut self, v: Vec<f64>) -> Self {
        self.contrast = Some(v);
        self
    }

    pub fn with_level(mut self, level: f64) -> Self {
        self.ci_level = level;
        self
    }

    /// The contrast as a vector of length `p`, after validation.
    pub fn contrast_vector(&self, p: usize) -> Result<DVector<f64>> {
        if self.b < 1 {
            return Err(Error::InvalidInput("B must be at least 1".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::InvalidInput(format!(
                "confidence level must lie in (0, 1), got {}",
                self.ci_level
            )));
        }
        match &self.contrast {
            None => {
                let mut v = DVector::zeros(p);
                v[0] = 1.0;
                Ok(v)
            }
            Some(v) => {
                if v.len() != p {
                    return Err(Error::InvalidInput(format!(
                        "contrast has length {} but there are {p} coefficients",
                        v.len()
                    )));
                }
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidInput(format!(
                        "contrast must have unit length, got norm {norm}"
                    )));
                }
                Ok(DVector::from_column_slice(v))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOutcome {
    /// `v'beta*` for the successful replicates, in replicate order.
    pub replicates: Vec<f64>,
    pub point: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub boot_variance: f64,
    pub failed_replicates: usize,
    pub redraws: usize,
    pub warnings: Vec<String>,
}

impl BootstrapOutcome {
    pub fn width(&self) -> f64 {
        self.ci_hi - self.ci_lo
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci_lo <= value && value <= self.ci_hi
    }
}

/// Percentile interval from the order statistics at positions
/// `ceil((B+1) a/2)` and `ceil((B+1)(1 - a/2))`, clamped to `[1, B]`.
pub fn percentile_ci(replicates: &[f64], level: f64) -> Result<(f64, f64)> {
    let b = replicates.len();
    if b < 2 {
        return Err(Error::InsufficientReplicates(b));
    }
    let mut sorted = replicates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    // the small offset keeps exact products such as 1000 * 0.025 from
    // rounding up to the next integer
    let position = |q: f64| (((b + 1) as f64 * q - 1e-9).ceil() as usize).clamp(1, b);
    let lo = position(alpha / 2.0);
    let hi = position(1.0 - alpha / 2.0);
    Ok((sorted[lo - 1], sorted[hi - 1]))
}

/// `point -/+ z_{1 - a/2} sqrt(variance)`.
pub fn normal_ci(point: f64, variance: f64, level: f64) -> (f64, f64) {
    let half = stats::two_sided_z(level) * variance.max(0.0).sqrt();
    (point - half, point + half)
}

/// Collects replicate values into an outcome, enforcing the failure limit.
pub(crate) fn assemble(
    point: f64,
    values: Vec<Option<f64>>,
    redraws: usize,
    level: f64,
    mut warnings: Vec<String>,
) -> Result<BootstrapOutcome> {
    let total = values.len();
    let replicates: Vec<f64> = values.into_iter().flatten().collect();
    let failed = total - replicates.len();
    if failed as f64 > MAX_FAILURE_RATE * total as f64 {
        return Err(Error::ExcessiveFailures { failed, total });
    }
    if failed > 0 {
        warnings.push(format!("{failed} of {total} replicates failed and were dropped"));
    }
    let (ci_lo, ci_hi) = percentile_ci(&replicates, level)?;
    Ok(BootstrapOutcome {
        boot_variance: stats::sample_variance(&replicates),
        replicates,
        point,
        ci_lo,
        ci_hi,
        failed_replicates: failed,
        redraws,
        warnings,
    })
}

/// Centers a pool in place so that its mean is zero.
pub(crate) fn center(pool: &mut [f64]) {
    let m = stats::mean(pool);
    for v in pool.iter_mut() {
        *v -= m;
    }
}

/// Residual pool for the empirical residual-family schemes, centered.
pub fn residual_pool(ctx: &FitContext, scheme: &Scheme) -> Result<Vec<f64>> {
    let (ds, loss, full) = (ctx.ds, ctx.loss, &ctx.full);
    let e = full.residuals.as_slice();
    let mut pool: Vec<f64> = match scheme {
        Scheme::ResidualRaw => e.to_vec(),
        Scheme::ResidualHatCorrected => {
            let h = mestim::hat_diagonal(ds)?;
            e.iter().zip(h.iter()).map(|(ei, hi)| ei / (1.0 - hi).sqrt()).collect()
        }
        Scheme::ResidualMcKean => {
            let h = mestim::hat_diagonal(ds)?;
            let d = mckean_factor(ds, loss, full)?;
            let mut out = Vec::with_capacity(e.len());
            for (ei, hi) in e.iter().zip(h.iter()) {
                let denom = 1.0 - d * hi;
                if !(denom > 0.0) {
                    return Err(Error::DegenerateScale);
                }
                out.push(ei / denom.sqrt());
            }
            out
        }
        Scheme::PredictedStandardized => {
            let pe = ctx.predicted_errors()?;
            pe.standardized.as_slice().to_vec()
        }
        other => {
            return Err(Error::InvalidInput(format!("{other} has no empirical residual pool")))
        }
    };
    center(&mut pool);
    Ok(pool)
}

/// The McKean-type correction factor
/// `d = 2 mean(e' psi(e')) / mean(psi'(e')) - mean(psi(e')^2) / mean(psi'(e'))^2`
/// with `e' = e / s` and `s` the least-squares noise scale.
pub fn mckean_factor(ds: &Dataset, loss: Loss, full: &FitResult) -> Result<f64> {
    let s = mestim::sigma_hat_ls(ds)?.sqrt();
    if !(s > 0.0) {
        return Err(Error::DegenerateScale);
    }
    let n = full.residuals.len() as f64;
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for &e in full.residuals.iter() {
        let z = e / s;
        let psi = loss.psi(z);
        a += z * psi;
        b += loss.psi_prime(z);
        c += psi * psi;
    }
    let (a, b, c) = (a / n, b / n, c / n);
    if !(b > 0.0) {
        return Err(Error::DegenerateScale);
    }
    Ok(2.0 * a / b - c / (b * b))
}

/// Runs `B` residual-type replicates `y* = X beta_hat + eps*`, where `draw`
/// fills `eps*` from the replicate's random stream.
pub(crate) fn residual_replicates<F>(
    ds: &Dataset,
    loss: Loss,
    full: &FitResult,
    plan: &ResamplingPlan,
    seed: u64,
    tag: u64,
    draw: F,
) -> Result<Vec<Option<f64>>>
where
    F: Fn(&mut StreamRng, &mut [f64]) + Sync,
{
    let n = ds.n();
    let v = plan.contrast_vector(ds.p())?;
    let point = v.dot(&full.beta_hat);
    let fitted = &ds.x * &full.beta_hat;
    if loss.is_quadratic() {
        // least-squares refits are linear in the response
        let a = LsFactor::new(&ds.x)?.contrast_map(&v);
        return Ok((0..plan.b)
            .into_par_iter()
            .map_init(
                || vec![0.0; n],
                |eps, b| {
                    let mut rng = rng::stream(seed, tag, b as u64);
                    draw(&mut rng, eps);
                    let shift: f64 = a.iter().zip(eps.iter()).map(|(ai, ei)| ai * ei).sum();
                    Some(point + shift)
                },
            )
            .collect());
    }
    Ok((0..plan.b)
        .into_par_iter()
        .map_init(
            || (Solver::new(plan.fit_options), vec![0.0; n]),
            |(solver, eps), b| {
                let mut rng = rng::stream(seed, tag, b as u64);
                draw(&mut rng, eps);
                let y = DVector::from_fn(n, |i, _| fitted[i] + eps[i]);
                match solver.fit(&ds.x, &y, None, loss, Some(&full.beta_hat)) {
                    Ok(r) if r.converged => Some(v.dot(&r.beta_hat)),
                    Ok(_) => None,
                    Err(e) => {
                        log::debug!("replicate {b} failed: {e}");
                        None
                    }
                }
            },
        )
        .collect())
}

/// Residual bootstrap for every scheme of the residual family.
pub fn residual_bootstrap(
    ds: &Dataset,
    loss: Loss,
    plan: &ResamplingPlan,
    seed: u64,
) -> Result<BootstrapOutcome> {
    residual_bootstrap_in(&FitContext::fit(ds, loss)?, plan, seed)
}

/// Residual bootstrap reusing the fit (and any leave-one-out refits) in `ctx`.
pub fn residual_bootstrap_in(ctx: &FitContext, plan: &ResamplingPlan, seed: u64) -> Result<BootstrapOutcome> {
    let (ds, loss, full) = (ctx.ds, ctx.loss, &ctx.full);
    let v = plan.contrast_vector(ds.p())?;
    let point = v.dot(&full.beta_hat);
    let tag = plan.scheme.rng_tag();
    let values = match &plan.scheme {
        Scheme::DeconvolutionResidual => {
            return crate::deconv::deconvolution_bootstrap_in(ctx, plan, seed)
        }
        Scheme::GaussianResidual => {
            let sigma = mestim::sigma_hat_ls(ds)?.sqrt();
            let normal = Normal::new(0.0, sigma).map_err(|_| Error::DegenerateScale)?;
            residual_replicates(ds, loss, full, plan, seed, tag, |rng, eps| {
                for e in eps.iter_mut() {
                    *e = normal.sample(rng);
                }
            })?
        }
        Scheme::PairsMultinomial | Scheme::WeightedIid { .. } => {
            return Err(Error::InvalidInput(format!(
                "{} is not a residual bootstrap",
                plan.scheme
            )))
        }
        scheme => {
            let pool = residual_pool(ctx, scheme)?;
            resample_pool(ds, loss, full, plan, seed, tag, &pool)?
        }
    };
    assemble(point, values, 0, plan.ci_level, Vec::new())
}

/// Replicates whose errors are drawn with replacement from `pool`.
pub(crate) fn resample_pool(
    ds: &Dataset,
    loss: Loss,
    full: &FitResult,
    plan: &ResamplingPlan,
    seed: u64,
    tag: u64,
    pool: &[f64],
) -> Result<Vec<Option<f64>>> {
    let m = pool.len();
    residual_replicates(ds, loss, full, plan, seed, tag, |rng, eps| {
        for e in eps.iter_mut() {
            *e = pool[rng.random_range(0..m)];
        }
    })
}

/// Pairs bootstrap: each replicate refits on `n` rows drawn with
/// replacement, expressed as multinomial row weights.
pub fn pairs_bootstrap(
    ds: &Dataset,
    loss: Loss,
    plan: &ResamplingPlan,
    seed: u64,
) -> Result<BootstrapOutcome> {
    pairs_bootstrap_in(&FitContext::fit(ds, loss)?, plan, seed)
}

pub fn pairs_bootstrap_in(ctx: &FitContext, plan: &ResamplingPlan, seed: u64) -> Result<BootstrapOutcome> {
    if plan.scheme != Scheme::PairsMultinomial {
        return Err(Error::InvalidInput(format!("{} is not the pairs bootstrap", plan.scheme)));
    }
    let n = ctx.ds.n();
    weighted_replicates(ctx, plan, seed, move |rng, w| {
        w.iter_mut().for_each(|v| *v = 0.0);
        for _ in 0..n {
            w[rng.random_range(0..n)] += 1.0;
        }
    })
}

/// Weighted bootstrap with iid weights from the plan's weight law.
pub fn weighted_bootstrap(
    ds: &Dataset,
    loss: Loss,
    plan: &ResamplingPlan,
    seed: u64,
) -> Result<BootstrapOutcome> {
    weighted_bootstrap_in(&FitContext::fit(ds, loss)?, plan, seed)
}

pub fn weighted_bootstrap_in(ctx: &FitContext, plan: &ResamplingPlan, seed: u64) -> Result<BootstrapOutcome> {
    let Scheme::WeightedIid { weights } = &plan.scheme else {
        return Err(Error::InvalidInput(format!("{} is not a weighted bootstrap", plan.scheme)));
    };
    weights.validate()?;
    let sampler = weights.sampler();
    weighted_replicates(ctx, plan, seed, move |rng, w| {
        for v in w.iter_mut() {
            *v = sampler.draw(rng);
        }
    })
}

/// Runs any bootstrap described by `plan`.
pub fn bootstrap(ds: &Dataset, loss: Loss, plan: &ResamplingPlan, seed: u64) -> Result<BootstrapOutcome> {
    bootstrap_in(&FitContext::fit(ds, loss)?, plan, seed)
}

/// [`bootstrap`] reusing an existing full-data fit.
pub fn bootstrap_in(ctx: &FitContext, plan: &ResamplingPlan, seed: u64) -> Result<BootstrapOutcome> {
    match plan.scheme {
        Scheme::PairsMultinomial => pairs_bootstrap_in(ctx, plan, seed),
        Scheme::WeightedIid { .. } => weighted_bootstrap_in(ctx, plan, seed),
        _ => residual_bootstrap_in(ctx, plan, seed),
    }
}

fn weighted_replicates<F>(
    ctx: &FitContext,
    plan: &ResamplingPlan,
    seed: u64,
    draw: F,
) -> Result<BootstrapOutcome>
where
    F: Fn(&mut StreamRng, &mut [f64]) + Sync,
{
    let (ds, loss) = (ctx.ds, ctx.loss);
    let (n, p) = (ds.n(), ds.p());
    let v = plan.contrast_vector(p)?;
    let point = v.dot(&ctx.full.beta_hat);
    let tag = plan.scheme.rng_tag();
    let mut warnings = Vec::new();
    let limit = 1.0 - (-1.0f64).exp();
    if matches!(plan.scheme, Scheme::PairsMultinomial) && ds.kappa() > limit {
        let msg = format!(
            "p/n = {:.3} exceeds 1 - 1/e; resampled designs are often singular",
            ds.kappa()
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let results: Vec<Result<(Option<f64>, usize)>> = (0..plan.b)
        .into_par_iter()
        .map_init(
            || (Solver::new(plan.fit_options), vec![0.0; n]),
            |(solver, w), b| {
                let mut rng = rng::stream(seed, tag, b as u64);
                let mut redraws = 0;
                loop {
                    draw(&mut rng, w);
                    let all_one = w.iter().all(|&x| x == 1.0);
                    let weights = if all_one { None } else { Some(&w[..]) };
                    match solver.fit(&ds.x, &ds.y, weights, loss, None) {
                        Ok(r) if r.converged => return Ok((Some(v.dot(&r.beta_hat)), redraws)),
                        Ok(_) => return Ok((None, redraws)),
                        Err(Error::RankDeficient { .. }) => {
                            redraws += 1;
                            if redraws > MAX_REDRAWS {
                                return Err(Error::TooManyRedraws {
                                    replicate: b,
                                    limit: MAX_REDRAWS,
                                });
                            }
                        }
                        Err(e) => {
                            log::debug!("replicate {b} failed: {e}");
                            return Ok((None, redraws));
                        }
                    }
                }
            },
        )
        .collect();
    let mut values = Vec::with_capacity(plan.b);
    let mut redraws = 0;
    for r in results {
        let (value, count) = r?;
        values.push(value);
        redraws += count;
    }
    assemble(point, values, redraws, plan.ci_level, warnings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JackknifeOutcome {
    pub point: f64,
    pub var_jack: f64,
    /// `(1 - p/n) var_jack`.
    pub corrected_ls: f64,
    /// `var_jack / gamma_hat`, when a `gamma_hat` was supplied.
    pub corrected_gamma: Option<f64>,
    pub ci: (f64, f64),
    pub ci_ls: (f64, f64),
    pub ci_gamma: Option<(f64, f64)>,
}

/// Jackknife variance `((n-1)/n) sum (v'(beta_(i) - beta_bar))^2` with its
/// dimension corrections and normal-theory intervals.
pub fn jackknife(
    ds: &Dataset,
    loss: Loss,
    v: &DVector<f64>,
    gamma_hat: Option<f64>,
    level: f64,
) -> Result<JackknifeOutcome> {
    jackknife_in(&FitContext::fit(ds, loss)?, v, gamma_hat, level)
}

pub fn jackknife_in(
    ctx: &FitContext,
    v: &DVector<f64>,
    gamma_hat: Option<f64>,
    level: f64,
) -> Result<JackknifeOutcome> {
    let (ds, full) = (ctx.ds, &ctx.full);
    if v.len() != ds.p() {
        return Err(Error::InvalidInput("contrast length must equal p".into()));
    }
    if let Some(g) = gamma_hat {
        if !(g > 0.0 && g.is_finite()) {
            return Err(Error::InvalidInput(format!("gamma_hat must be positive, got {g}")));
        }
    }
    let betas = ctx.loo_betas()?;
    let n = ds.n() as f64;
    let values: Vec<f64> = betas.iter().map(|b| v.dot(b)).collect();
    let m = stats::mean(&values);
    let var_jack = (n - 1.0) / n * values.iter().map(|t| (t - m).powi(2)).sum::<f64>();
    let corrected_ls = (1.0 - ds.kappa()) * var_jack;
    let corrected_gamma = gamma_hat.map(|g| var_jack / g);
    let point = v.dot(&full.beta_hat);
    Ok(JackknifeOutcome {
        point,
        var_jack,
        corrected_ls,
        corrected_gamma,
        ci: normal_ci(point, var_jack, level),
        ci_ls: normal_ci(point, corrected_ls, level),
        ci_gamma: corrected_gamma.map(|g| normal_ci(point, g, level)),
    })
}

/// Normal-theory least-squares variance of `v'beta_hat`,
/// `sigma_hat^2 v'(X'X)^{-1}v`.
pub fn normal_theory_variance(ds: &Dataset, v: &DVector<f64>) -> Result<f64> {
    let f = LsFactor::new(&ds.x)?;
    let s2 = mestim::sigma_hat_ls(ds)?;
    let inv: DMatrix<f64> = f.xtx_inverse();
    Ok(s2 * (v.transpose() * inv * v)[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_positions() {
        let reps: Vec<f64> = (1..=999).map(|i| i as f64).collect();
        assert_eq!(percentile_ci(&reps, 0.95).unwrap(), (25.0, 975.0));
        let reps: Vec<f64> = (1..=500).map(|i| i as f64).collect();
        assert_eq!(percentile_ci(&reps, 0.95).unwrap(), (13.0, 489.0));
        assert_eq!(percentile_ci(&[3.0; 10], 0.9).unwrap(), (3.0, 3.0));
        assert!(matches!(percentile_ci(&[1.0], 0.95), Err(Error::InsufficientReplicates(1))));
    }

    #[test]
    fn normal_interval() {
        let (lo, hi) = normal_ci(0.0, 1.0, 0.95);
        assert!((hi - 1.959964).abs() < 1e-6);
        assert!((lo + 1.959964).abs() < 1e-6);
    }

    #[test]
    fn weight_law_moments() {
        for law in [
            WeightLaw::ConstantOne,
            WeightLaw::PoissonOne,
            WeightLaw::mixture(0.9).unwrap(),
            WeightLaw::table(vec![0.0, 2.0], vec![0.5, 0.5]).unwrap(),
        ] {
            assert!((law.expectation(|w| w) - 1.0).abs() < 1e-12, "{law}");
        }
        assert!((WeightLaw::PoissonOne.expectation(|w| w * w) - 2.0).abs() < 1e-12);
        assert!(WeightLaw::mixture(1.2).is_err());
        assert!(WeightLaw::table(vec![0.5, 2.0], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn weight_sampler_mean() {
        let law = WeightLaw::mixture(0.8).unwrap();
        let s = law.sampler();
        let mut rng = rng::stream(3, 4, 5);
        let draws: Vec<f64> = (0..200_000).map(|_| s.draw(&mut rng)).collect();
        let m = stats::mean(&draws);
        let v = stats::sample_variance(&draws);
        assert!((m - 1.0).abs() < 0.01);
        assert!((v - 0.64).abs() < 0.02);
        assert!(draws.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in [
            "residual_raw",
            "residual_hat",
            "residual_mckean",
            "predicted_std",
            "deconv",
            "gaussian",
            "pairs",
            "weighted:const1",
            "weighted:poisson1",
            "weighted:mixture:0.9203",
        ] {
            assert_eq!(s.parse::<Scheme>().unwrap().to_string(), s);
        }
        assert!("bogus".parse::<Scheme>().is_err());
    }
}
