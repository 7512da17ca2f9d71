//! Acceptance suite. Runs every criterion at its stated scale and prints one
//! PASS/FAIL line each; exits nonzero if any criterion fails.
//!
//! All simulation seeds are fixed here once and never tuned.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use hdboot::deconv::{deconvolve_values, monotonize_cdf};
use hdboot::laws::ErrorLaw;
use hdboot::mestim::{self, Dataset};
use hdboot::resample::{self, ResamplingPlan, Scheme, WeightLaw};
use hdboot::rng;
use hdboot::simharness::{self, DesignKind, Experiment, ExperimentConfig, LambdaLaw, Method, SimReport};
use hdboot::theory::{self, RiskOptions};
use hdboot::Loss;

const SEED: u64 = 20261018;

struct Outcome {
    pass: bool,
    notes: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Outcome { pass: true, notes: Vec::new() }
    }

    fn check(&mut self, ok: bool, note: String) {
        self.pass &= ok;
        self.notes.push(if ok { note } else { format!("{note} [FAIL]") });
    }
}

fn within(value: f64, lo: f64, hi: f64) -> bool {
    value >= lo && value <= hi
}

fn method(name: &str) -> Method {
    name.parse().expect("method name")
}

fn metric(report: &SimReport, kappa: f64, scheme: &str, name: &str) -> f64 {
    report.value(kappa, &method(scheme).to_string(), name).unwrap_or(f64::NAN)
}

fn closed_form_theory() -> Outcome {
    let mut out = Outcome::new();
    for kappa in [0.1, 0.3, 0.5] {
        let c = theory::solve_c(&WeightLaw::ConstantOne, kappa).unwrap();
        let want = kappa / (1.0 - kappa);
        out.check((c - want).abs() <= 1e-9, format!("c({kappa})={c:.12}"));
    }
    let pred = theory::boot_var_prediction(&WeightLaw::ConstantOne, 0.3, 1.0).unwrap();
    out.check(pred.overestimation_factor.abs() < 1e-12, format!("const1 factor={:.1e}", pred.overestimation_factor));
    let f = theory::jackknife_factor(0.5);
    out.check((f - 2.0).abs() < 1e-12, format!("jackknife_factor(0.5)={f}"));
    out
}

fn risk_system_l2() -> Outcome {
    let mut out = Outcome::new();
    let sol = theory::solve_risk_system(Loss::SquaredError, &ErrorLaw::std_normal(), 0.3, RiskOptions::default())
        .unwrap();
    let rel = (sol.r * sol.r / (3.0 / 7.0) - 1.0).abs();
    out.check(rel <= 1e-3, format!("r^2={:.6} rel.err={rel:.2e}", sol.r * sol.r));
    out
}

fn near_one_limit() -> Outcome {
    let mut out = Outcome::new();
    let law = ErrorLaw::std_laplace();
    let kappa = 0.95;
    let sol = theory::solve_risk_system(Loss::huber(1.0), &law, kappa, RiskOptions::default()).unwrap();
    let ratio = sol.r * sol.r * (1.0 - kappa) / law.variance();
    out.check(within(ratio, 0.85, 1.15), format!("r^2(1-k)/var={ratio:.4}"));
    out
}

fn calibration_table() -> Outcome {
    let mut out = Outcome::new();
    for (kappa, want) in [(0.1, 0.9875), (0.2, 0.9688), (0.3, 0.9426), (0.5, 0.9203)] {
        let alpha = theory::calibrate_alpha(kappa).unwrap();
        out.check((alpha - want).abs() <= 0.005, format!("alpha({kappa})={alpha:.4}"));
    }
    out
}

fn l2_gaussian_sweep() -> SimReport {
    let methods = [
        "residual_raw",
        "residual_hat",
        "predicted_std",
        "pairs",
        "weighted:calibrated",
        "jackknife",
        "jackknife_gamma",
    ];
    let mut cfg = ExperimentConfig::new(
        Experiment::Coverage,
        vec![0.3, 0.5],
        Loss::SquaredError,
        methods.iter().map(|m| method(m)).collect(),
    );
    cfg.master_seed = SEED;
    simharness::run(&cfg).expect("L2 sweep")
}

fn pairs_variance(report: &SimReport) -> Outcome {
    let mut out = Outcome::new();
    for kappa in [0.3, 0.5] {
        let predicted = theory::boot_var_prediction(&WeightLaw::PoissonOne, kappa, 1.0)
            .unwrap()
            .overestimation_factor;
        let observed = metric(report, kappa, "pairs", "var_ratio_mean");
        let rel = (observed / predicted - 1.0).abs();
        out.check(rel <= 0.15, format!("k={kappa}: sim {observed:.3} vs theory {predicted:.3}"));
    }
    out
}

fn jackknife_overestimation(report: &SimReport) -> Outcome {
    let mut out = Outcome::new();
    for kappa in [0.3, 0.5] {
        let target = 1.0 / (1.0 - kappa);
        let median = metric(report, kappa, "jackknife", "var_ratio_median");
        out.check((median - target).abs() <= 0.15, format!("k={kappa}: median ratio {median:.3}"));
        let gamma = metric(report, kappa, "jackknife_gamma", "gamma_hat_mean");
        out.check((gamma - target).abs() <= 0.1, format!("gamma_hat {gamma:.3}"));
    }
    out
}

fn coverage_orderings(report: &SimReport) -> Outcome {
    let mut out = Outcome::new();
    let miss = |scheme| metric(report, 0.5, scheme, "miscoverage");
    let raw = miss("residual_raw");
    out.check((raw - 0.19).abs() <= 0.04, format!("residual_raw {raw:.3}"));
    let pairs = miss("pairs");
    out.check(pairs <= 0.01, format!("pairs {pairs:.3}"));
    let hat = miss("residual_hat");
    out.check(within(hat, 0.02, 0.08), format!("residual_hat {hat:.3}"));
    let std = miss("predicted_std");
    out.check(within(std, 0.01, 0.08), format!("predicted_std {std:.3}"));
    out
}

fn calibrated_weights(report: &SimReport) -> Outcome {
    let mut out = Outcome::new();
    let miss = metric(report, 0.5, "weighted:calibrated", "miscoverage");
    out.check(within(miss, 0.03, 0.09), format!("miscoverage {miss:.3}"));
    let ratio = metric(report, 0.5, "weighted:calibrated", "var_ratio_mean");
    out.check(within(ratio, 0.9, 1.1), format!("var ratio {ratio:.3}"));
    out
}

fn width_inflation(report: &SimReport) -> Outcome {
    let mut out = Outcome::new();
    let gaussian = metric(report, 0.5, "pairs", "width_ratio");
    out.check((gaussian - 1.74).abs() <= 0.2, format!("gaussian {gaussian:.3}"));

    let mut cfg = ExperimentConfig::new(Experiment::CiWidth, vec![0.5], Loss::SquaredError, vec![method("pairs")]);
    cfg.design = DesignKind::Elliptical(LambdaLaw::ExpSqrt2);
    cfg.master_seed = SEED;
    let elliptical = simharness::run(&cfg).expect("elliptical sweep");
    let ratio = metric(&elliptical, 0.5, "pairs", "width_ratio");
    out.check(ratio >= 3.0, format!("elliptical-exp {ratio:.3}"));
    out
}

fn gaussian_problem(n: usize, p: usize, seed: u64) -> Dataset {
    let x = simharness::gen_design(DesignKind::GaussianIid, n, p, seed);
    let y = simharness::gen_errors(&ErrorLaw::std_normal(), n, seed);
    Dataset::new(x, y).unwrap()
}

/// Plain iteratively reweighted least squares, independent of the library.
fn irls_oracle(ds: &Dataset, loss: Loss) -> DVector<f64> {
    let (x, y) = (&ds.x, &ds.y);
    let mut beta = (x.transpose() * x).lu().solve(&(x.transpose() * y)).unwrap();
    for _ in 0..10_000 {
        let r = y - x * &beta;
        let w = DVector::from_fn(r.len(), |i, _| {
            let e = r[i];
            if e.abs() < 1e-300 {
                1.0
            } else {
                loss.psi(e) / e
            }
        });
        let xw = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * w[i]);
        let next = (xw.transpose() * x).lu().solve(&(xw.transpose() * y)).unwrap();
        let step = (&next - &beta).amax();
        beta = next;
        if step < 1e-15 {
            break;
        }
    }
    beta
}

fn property_suites() -> Outcome {
    let mut out = Outcome::new();

    // Moreau: z = prox(c rho)(x) satisfies x - z in c * subdifferential(rho)(z)
    let losses = [Loss::SquaredError, Loss::huber(1.345), Loss::AbsoluteError, Loss::smoothed_absolute(0.1)];
    let mut worst: f64 = 0.0;
    for loss in losses {
        for ci in 1..=20 {
            let c = 0.1 * ci as f64;
            for xi in -100..=100 {
                let x = 0.05 * xi as f64;
                let z = loss.prox(c, x);
                let gap = match loss {
                    Loss::AbsoluteError if z == 0.0 => (x.abs() - c).max(0.0),
                    _ => (x - z - c * loss.psi(z)).abs(),
                };
                worst = worst.max(gap);
            }
        }
    }
    out.check(worst <= 1e-12, format!("moreau gap {worst:.1e}"));

    let ds = gaussian_problem(10, 3, rng::derive_seed(SEED, rng::tag("irls"), 0));
    let loss = Loss::huber(1.345);
    let newton = mestim::fit(&ds, loss).unwrap();
    let oracle = irls_oracle(&ds, loss);
    let gap = (&newton.beta_hat - oracle).amax();
    out.check(gap <= 1e-6, format!("irls/newton {gap:.1e}"));

    let ds = gaussian_problem(60, 15, rng::derive_seed(SEED, rng::tag("loo"), 0));
    let full = mestim::fit(&ds, Loss::SquaredError).unwrap();
    let h = mestim::hat_diagonal(&ds).unwrap();
    let pe = mestim::predicted_errors(&ds, Loss::SquaredError).unwrap();
    let gap = (0..ds.n())
        .map(|i| (full.residuals[i] - (1.0 - h[i]) * pe.values[i]).abs())
        .fold(0.0, f64::max);
    out.check(gap <= 1e-8, format!("loo identity {gap:.1e}"));

    // fitting X A gives A^{-1} beta_hat(X)
    let ds = gaussian_problem(80, 8, rng::derive_seed(SEED, rng::tag("equivariance"), 0));
    let a = simharness::gen_design(DesignKind::GaussianIid, 8, 8, rng::derive_seed(SEED, rng::tag("sigma"), 0))
        + DMatrix::identity(8, 8) * 3.0;
    let mut gap: f64 = 0.0;
    for loss in [Loss::SquaredError, Loss::huber(1.345), Loss::AbsoluteError] {
        let base = mestim::fit(&ds, loss).unwrap().beta_hat;
        let moved = Dataset::new(&ds.x * &a, ds.y.clone()).unwrap();
        let back = &a * mestim::fit(&moved, loss).unwrap().beta_hat;
        gap = gap.max((back - base).amax());
    }
    out.check(gap <= 1e-6, format!("equivariance {gap:.1e}"));

    let mut stream = rng::stream(SEED, rng::tag("monotonize"), 0);
    let mut raw = vec![0.0; 300];
    ErrorLaw::std_normal().fill(&mut stream, &mut raw);
    let grid: Vec<f64> = (0..raw.len()).map(|i| i as f64 * 0.01).collect();
    let noisy: Vec<f64> = raw.iter().enumerate().map(|(i, e)| i as f64 / 300.0 + 0.1 * e).collect();
    let once = monotonize_cdf(&grid, &noisy).unwrap();
    let twice = monotonize_cdf(&grid, &once.values).unwrap();
    out.check(once.values == twice.values, "monotonize idempotent".into());

    let ds = gaussian_problem(80, 20, rng::derive_seed(SEED, rng::tag("replay"), 0));
    let plan = ResamplingPlan::new(Scheme::PairsMultinomial).with_b(100);
    let boot = || serde_json::to_string(&resample::bootstrap(&ds, loss, &plan, SEED).unwrap()).unwrap();
    let first = boot();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(boot);
    out.check(first == boot() && first == single, "boot replay".into());

    let mut cfg = ExperimentConfig::new(
        Experiment::Coverage,
        vec![0.2],
        loss,
        vec![method("residual_hat"), method("pairs"), method("jackknife")],
    );
    cfg.n = 50;
    cfg.n_sims = 4;
    cfg.b = 40;
    cfg.master_seed = SEED;
    cfg.plots = false;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let logs: Vec<Vec<u8>> = dirs
        .iter()
        .map(|d| {
            let mut c = cfg.clone();
            c.output_dir = Some(d.path().to_path_buf());
            simharness::run(&c).unwrap();
            std::fs::read(d.path().join(simharness::SIMS_FILE)).unwrap()
        })
        .collect();
    out.check(!logs[0].is_empty() && logs[0] == logs[1], "simulate replay".into());
    out
}

fn deconvolution_recovery() -> Outcome {
    let mut out = Outcome::new();
    let n = 2000;
    let noise_sd = 0.5f64.sqrt();
    let signal = ErrorLaw::std_laplace();
    let mut obs = vec![0.0; n];
    let mut noise = vec![0.0; n];
    signal.fill(&mut rng::stream(SEED, rng::tag("signal"), 0), &mut obs);
    ErrorLaw::Normal { sd: noise_sd }.fill(&mut rng::stream(SEED, rng::tag("noise"), 0), &mut noise);
    for (o, e) in obs.iter_mut().zip(&noise) {
        *o += e;
    }
    let cdf = deconvolve_values(&obs, &vec![noise_sd; n], noise_sd, None).unwrap();
    let (_, var) = cdf.moments();
    let rel = (var / signal.variance() - 1.0).abs();
    out.check(rel <= 0.2, format!("var {var:.3} vs {:.1}", signal.variance()));

    let mut cfg = ExperimentConfig::new(Experiment::Coverage, vec![0.5], Loss::AbsoluteError, vec![method("deconv")]);
    cfg.error_law = ErrorLaw::std_laplace();
    cfg.master_seed = SEED;
    let report = simharness::run(&cfg).expect("deconvolution sweep");
    let miss = metric(&report, 0.5, "deconv", "miscoverage");
    out.check(miss <= 0.10, format!("bootstrap miscoverage {miss:.3}"));
    out
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut report = |id: usize, name: &str, run: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let outcome = run();
        let status = if outcome.pass { "PASS" } else { "FAIL" };
        let line = format!(
            "criterion {id:>2} {status} {name}: {} ({:.0?})",
            outcome.notes.join("; "),
            t.elapsed()
        );
        println!("{line}");
        lines.push(outcome.pass);
    };

    report(1, "closed-form theory", &mut closed_form_theory);
    report(2, "risk system, L2", &mut risk_system_l2);
    report(3, "kappa -> 1 limit", &mut near_one_limit);
    report(4, "weight calibration", &mut calibration_table);
    let sweep = l2_gaussian_sweep();
    report(5, "pairs variance vs theory", &mut || pairs_variance(&sweep));
    report(6, "jackknife over-estimation", &mut || jackknife_overestimation(&sweep));
    report(7, "coverage orderings", &mut || coverage_orderings(&sweep));
    report(8, "calibrated weights", &mut || calibrated_weights(&sweep));
    report(9, "interval width inflation", &mut || width_inflation(&sweep));
    report(10, "property suites", &mut property_suites);
    report(11, "deconvolution", &mut deconvolution_recovery);

    let failed = lines.iter().filter(|ok| !**ok).count();
    println!("{} of {} criteria passed in {:.0?}", lines.len() - failed, lines.len(), start.elapsed());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
