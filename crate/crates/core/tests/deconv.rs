use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use hdboot::deconv::{
    self, deconvolve_values, estimate_lambda_sq, estimate_noise_sd, monotonize_cdf, raw_draws, sample_ghat, NoiseSd,
};
use hdboot::laws::ErrorLaw;
use hdboot::mestim::{Dataset, PredictedErrors};
use hdboot::resample::{self, ResamplingPlan, Scheme};
use hdboot::rng;
use hdboot::simharness::{gen_design, gen_errors, DesignKind};
use hdboot::{stats, Loss};

fn draws(law: &ErrorLaw, n: usize, label: &str) -> Vec<f64> {
    let mut out = vec![0.0; n];
    law.fill(&mut rng::stream(77, rng::tag(label), 0), &mut out);
    out
}

fn ks_to_sample(cdf: &deconv::DeconvolvedCdf, sample: &[f64]) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf.eval(x);
            (f - i as f64 / m).abs().max((f - (i + 1) as f64 / m).abs())
        })
        .fold(0.0, f64::max)
}

/// Integral of `x^k dF` by the trapezoid rule on the cdf's own grid.
fn trapezoid_moment(cdf: &deconv::DeconvolvedCdf, k: i32) -> f64 {
    (1..cdf.grid.len())
        .map(|i| {
            let mass = cdf.values[i] - cdf.values[i - 1];
            mass * (cdf.grid[i].powi(k) + cdf.grid[i - 1].powi(k)) / 2.0
        })
        .sum()
}

#[test]
fn noise_sd_boundary_and_arithmetic() {
    let v = DVector::from_column_slice(&[-1.0, 1.0, -1.0, 1.0]);
    let var = stats::sample_variance(v.as_slice());
    let pe = PredictedErrors::from_values(v.clone(), var).unwrap();
    assert_eq!(estimate_noise_sd(&pe), NoiseSd::Fallback);
    let pe = PredictedErrors::from_values(v, var / 2.0).unwrap();
    match estimate_noise_sd(&pe) {
        NoiseSd::Estimate(s) => assert!((s - (var / 2.0).sqrt()).abs() < 1e-12),
        other => panic!("{other:?}"),
    }
}

#[test]
fn laplace_plus_gaussian_recovers_the_variance() {
    let n = 2000;
    let noise = 0.5f64.sqrt();
    let signal = draws(&ErrorLaw::std_laplace(), n, "signal");
    let eps = draws(&ErrorLaw::Normal { sd: noise }, n, "noise");
    let obs: Vec<f64> = signal.iter().zip(&eps).map(|(a, b)| a + b).collect();
    let cdf = deconvolve_values(&obs, &vec![noise; n], noise, None).unwrap();
    let (_, var) = cdf.moments();
    assert!((var / 2.0 - 1.0).abs() < 0.2, "{var}");
    // the piecewise-uniform moments agree with a direct quadrature
    let m1 = trapezoid_moment(&cdf, 1);
    let m2 = trapezoid_moment(&cdf, 2);
    assert!((m2 - m1 * m1 - var).abs() < 0.02 * var);
    assert!(cdf.grid.len() >= 512);
    assert!(cdf.values.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!((cdf.values[0], *cdf.values.last().unwrap()), (0.0, 1.0));
}

#[test]
fn pure_noise_shrinks_to_the_kernel_width() {
    // the estimate is the point mass convolved with the kernel, whose
    // variance is 6 h^2
    let n = 2000;
    let noise = 1.0;
    let obs = draws(&ErrorLaw::Normal { sd: noise }, n, "pure");
    let cdf = deconvolve_values(&obs, &vec![noise; n], noise, None).unwrap();
    let h = deconv::default_bandwidth(noise, n);
    let (_, var) = cdf.moments();
    assert!(var < 6.0 * h * h * 1.25, "{var} vs {}", 6.0 * h * h);
}

#[test]
fn vanishing_noise_tracks_the_empirical_cdf() {
    let n = 2000;
    let obs = draws(&ErrorLaw::std_laplace(), n, "ecdf");
    let scale = stats::sample_variance(&obs).sqrt();
    let cdf = deconvolve_values(&obs, &vec![1e-3 * scale; n], 1e-3 * scale, Some(0.02 * scale)).unwrap();
    assert!(ks_to_sample(&cdf, &obs) < 0.05);
}

#[test]
fn excessive_noise_reports_underflow() {
    let obs = draws(&ErrorLaw::std_normal(), 100, "under");
    let err = deconvolve_values(&obs, &vec![5.0; 100], 5.0, Some(0.01)).unwrap_err();
    assert!(matches!(err, hdboot::Error::NumericalUnderflow { .. }));
}

#[test]
fn monotone_input_keeps_interior_increments() {
    let grid: Vec<f64> = (0..50).map(|i| i as f64 / 10.0 - 2.5).collect();
    let raw: Vec<f64> = grid.iter().map(|&x| stats::normal_cdf(x)).collect();
    let cdf = monotonize_cdf(&grid, &raw).unwrap();
    let first = cdf.values.iter().position(|&v| v > 0.0).unwrap();
    let last = cdf.values.iter().position(|&v| v >= 1.0).unwrap();
    let scale = (cdf.values[first + 1] - cdf.values[first]) / (raw[first + 1] - raw[first]);
    for k in first + 1..last {
        let want = (raw[k] - raw[k - 1]) * scale;
        assert!((cdf.values[k] - cdf.values[k - 1] - want).abs() < 1e-12);
    }
}

#[test]
fn worked_monotonization_example() {
    let cdf = monotonize_cdf(&[0.0, 1.0, 2.0, 3.0], &[0.2, 0.1, 0.5, 1.0]).unwrap();
    let want = [0.0, 0.0, 4.0 / 9.0, 1.0];
    for (g, w) in cdf.values.iter().zip(want) {
        assert!((g - w).abs() < 1e-12);
    }
    assert!(matches!(monotonize_cdf(&[0.0, 1.0, 2.0], &[0.4; 3]), Err(hdboot::Error::DegenerateCdf)));
}

#[test]
fn inverse_cdf_draws_follow_the_cdf() {
    let grid: Vec<f64> = (0..600).map(|i| -6.0 + i as f64 * 0.02).collect();
    let raw: Vec<f64> = grid.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
    let cdf = monotonize_cdf(&grid, &raw).unwrap();
    let mut out = vec![0.0; 100_000];
    raw_draws(&cdf, &mut rng::stream(5, rng::tag("ks"), 0), &mut out);
    assert!(ks_to_sample(&cdf, &out) < 0.01);

    let g = sample_ghat(&cdf, 5000, 1.7, 9).unwrap();
    assert!(!g.degenerate);
    assert!(stats::mean(&g.draws).abs() < 1e-10);
    assert!((stats::sample_variance(&g.draws) - 1.7 * 1.7).abs() < 1e-10);
}

#[test]
fn row_scale_estimates() {
    // exchangeable Gaussian rows: every ratio near 1, fluctuating like
    // chi-square(p)/p
    let ds = Dataset::new(gen_design(DesignKind::GaussianIid, 500, 250, 1), DVector::zeros(500)).unwrap();
    let est = estimate_lambda_sq(&ds).unwrap();
    let dev: Vec<f64> = est.lambda_sq_hat.iter().map(|l| (l - 1.0).abs()).collect();
    assert!(dev.iter().cloned().fold(0.0, f64::max) < 0.45);
    let expected_mad = (2.0f64 / 250.0).sqrt() * (2.0 / std::f64::consts::PI).sqrt();
    assert!((stats::mean(&dev) / expected_mad - 1.0).abs() < 0.15);

    // two groups with lambda 0.5 and 1.5 separate cleanly
    let x = DMatrix::from_fn(500, 250, |i, j| ds.x[(i, j)] * if i % 2 == 0 { 0.5 } else { 1.5 });
    let est = estimate_lambda_sq(&Dataset::new(x, DVector::zeros(500)).unwrap()).unwrap();
    let small = est.lambda_sq_hat.iter().step_by(2).cloned().fold(0.0, f64::max);
    let large = est.lambda_sq_hat.iter().skip(1).step_by(2).cloned().fold(f64::INFINITY, f64::min);
    assert!(large > 3.0 * small);

    // equal-norm rows, one tripled
    let n = 40;
    let mut x = DMatrix::from_fn(n, 4, |i, j| if (i + j) % 4 == 0 { 1.0 } else { 0.0 });
    x.row_mut(7).scale_mut(3.0);
    let est = estimate_lambda_sq(&Dataset::new(x, DVector::zeros(n)).unwrap()).unwrap();
    let nf = n as f64;
    assert!((est.lambda_sq_hat[7] - 9.0 * nf / (nf + 8.0)).abs() < 1e-12);
    assert!((est.lambda_sq_hat[0] - nf / (nf + 8.0)).abs() < 1e-12);
}

#[test]
#[ignore = "300 simulations at n = 500"]
fn l1_laplace_coverage_at_half() {
    let plan = ResamplingPlan::new(Scheme::DeconvolutionResidual).with_b(300);
    let mut miss = 0;
    for s in 0..300 {
        let x = gen_design(DesignKind::GaussianIid, 500, 250, 5000 + s);
        let y = gen_errors(&ErrorLaw::std_laplace(), 500, 5000 + s);
        let out = resample::bootstrap(&Dataset::new(x, y).unwrap(), Loss::AbsoluteError, &plan, s).unwrap();
        miss += usize::from(!out.covers(0.0));
    }
    assert!((miss as f64 / 300.0 - 0.035).abs() < 0.03, "{miss}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn monotonize_is_idempotent(raw in prop::collection::vec(-0.5f64..1.5, 3..80)) {
        let grid: Vec<f64> = (0..raw.len()).map(|i| i as f64).collect();
        if let Ok(once) = monotonize_cdf(&grid, &raw) {
            let twice = monotonize_cdf(&grid, &once.values).unwrap();
            prop_assert_eq!(&once.values, &twice.values);
            prop_assert!(once.values.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(once.values[0], 0.0);
            prop_assert_eq!(*once.values.last().unwrap(), 1.0);
        }
    }

    #[test]
    fn quantile_stays_on_the_grid(u in 0.0f64..1.0) {
        let grid: Vec<f64> = (0..100).map(|i| i as f64 * 0.1).collect();
        let raw: Vec<f64> = grid.iter().map(|x| (x / 9.9).powi(2)).collect();
        let cdf = monotonize_cdf(&grid, &raw).unwrap();
        let q = cdf.quantile(u);
        prop_assert!(q >= grid[0] && q <= grid[99]);
        prop_assert!((cdf.eval(q) - u).abs() < 1e-9 || u < 1e-9);
    }
}
