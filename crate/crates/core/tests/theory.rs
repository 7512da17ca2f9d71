use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_distr::{Distribution, Poisson};

use hdboot::laws::ErrorLaw;
use hdboot::mestim::{self, Dataset};
use hdboot::simharness::{gen_design, gen_errors, DesignKind};
use hdboot::theory::{self, RiskOptions};
use hdboot::{stats, Loss, WeightLaw};

fn gaussian(n: usize, p: usize, seed: u64) -> Dataset {
    let x = gen_design(DesignKind::GaussianIid, n, p, seed);
    let y = gen_errors(&ErrorLaw::std_normal(), n, seed);
    Dataset::new(x, y).unwrap()
}

#[test]
fn poisson_c_matches_a_monte_carlo_oracle() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let pois = Poisson::new(1.0).unwrap();
    // tabulate the draws so each bisection step is cheap
    let mut counts = [0u64; 32];
    let m = 10_000_000;
    for _ in 0..m {
        let k: f64 = pois.sample(&mut rng);
        counts[(k as usize).min(31)] += 1;
    }
    let mean = |c: f64| -> f64 {
        counts.iter().enumerate().map(|(k, &n)| n as f64 / (1.0 + c * k as f64)).sum::<f64>() / m as f64
    };
    let (mut lo, mut hi) = (0.0, 100.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean(mid) > 0.7 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = theory::solve_c(&WeightLaw::PoissonOne, 0.3).unwrap();
    assert!((c - lo).abs() < 1e-3, "{c} vs {lo}");
}

#[test]
fn poisson_factor_grows_with_kappa() {
    let f = |k| theory::boot_var_prediction(&WeightLaw::PoissonOne, k, 1.0).unwrap().overestimation_factor;
    assert!((1.1..1.5).contains(&f(0.3)), "{}", f(0.3));
    assert!((2.6..3.3).contains(&f(0.5)), "{}", f(0.5));
    assert!(f(0.1) < f(0.3) && f(0.3) < f(0.5));
}

#[test]
fn calibrated_mixture_is_unbiased() {
    let pred = theory::boot_var_prediction(&WeightLaw::PoissonMixture { alpha: 0.9875 }, 0.1, 1.0).unwrap();
    assert!((pred.overestimation_factor - 1.0).abs() < 0.01);
    for kappa in [0.1, 0.3, 0.5] {
        let alpha = theory::calibrate_alpha(kappa).unwrap();
        let f = theory::boot_var_prediction(&WeightLaw::mixture(alpha).unwrap(), kappa, 2.0).unwrap();
        assert!((f.overestimation_factor - 1.0).abs() <= 0.01);
        assert!(f.expected_boot_var_scaled >= 0.0);
    }
}

#[test]
fn l2_gamma_hat_matches_direct_traces() {
    let ds = gaussian(120, 40, 3);
    let g = theory::gamma_hat(&ds, Loss::SquaredError).unwrap();
    let s = ds.x.transpose() * &ds.x / 120.0;
    let inv = s.try_inverse().unwrap();
    let t1 = inv.trace() / 40.0;
    let t2 = (&inv * &inv).trace() / 40.0;
    assert!((g - t2 / (t1 * t1)).abs() < 1e-10);
}

#[test]
fn l1_gamma_hat_is_singular() {
    let ds = gaussian(60, 10, 4);
    assert!(matches!(
        theory::gamma_hat(&ds, Loss::AbsoluteError),
        Err(hdboot::Error::SingularCurvature { .. })
    ));
}

#[test]
fn gamma_hat_tracks_the_jackknife_factor() {
    let values: Vec<f64> = (0..200).map(|s| theory::gamma_hat(&gaussian(500, 250, 100 + s), Loss::SquaredError).unwrap()).collect();
    assert!((stats::mean(&values) - 2.0).abs() < 0.1);
}

#[test]
fn l2_risk_closed_form_across_kappa() {
    let opts = RiskOptions { mc_size: 200_000, ..RiskOptions::default() };
    for (kappa, sd) in [(0.1, 1.0), (0.4, 2.0), (0.7, 0.5)] {
        let sol = theory::solve_risk_system(Loss::SquaredError, &ErrorLaw::Normal { sd }, kappa, opts).unwrap();
        let want = sd * sd * kappa / (1.0 - kappa);
        assert!((sol.r * sol.r / want - 1.0).abs() < 1e-2, "kappa {kappa}");
        assert!((sol.c - kappa / (1.0 - kappa)).abs() < 1e-2 * (1.0 + sol.c));
    }
}

#[test]
fn huber_risk_matches_simulated_fits() {
    let opts = RiskOptions { mc_size: 200_000, ..RiskOptions::default() };
    let loss = Loss::huber(1.345);
    let sol = theory::solve_risk_system(loss, &ErrorLaw::std_normal(), 0.3, opts).unwrap();
    let risk: Vec<f64> = (0..100)
        .map(|s| mestim::fit(&gaussian(500, 150, 700 + s), loss).unwrap().beta_hat.norm())
        .collect();
    let sim = stats::mean(&risk);
    assert!((sol.r / sim - 1.0).abs() < 0.1, "{} vs {sim}", sol.r);
}

#[test]
fn asymptotic_interval_formula() {
    // X'X/n = I with n = 200, p = 100
    let x = DMatrix::from_fn(200, 100, |i, j| if i % 100 == j { 10.0 } else { 0.0 });
    let ds = Dataset::new(x, DVector::from_fn(200, |i, _| (i as f64).sin())).unwrap();
    let v = DVector::from_fn(100, |j, _| if j == 0 { 1.0 } else { 0.0 });
    let (lo, hi) = theory::asymptotic_ci(&ds, Loss::SquaredError, &v, 1.0, 0.95).unwrap();
    let half = 1.959964 * 0.5f64.sqrt() / 10.0;
    assert!(((hi - lo) / 2.0 - half).abs() < 1e-6);
    let (lo, hi) = theory::asymptotic_ci(&ds, Loss::SquaredError, &v, 0.0, 0.95).unwrap();
    assert_eq!(lo, hi);
}

#[test]
fn sigma_contrast_estimator_cases() {
    let v = DVector::from_fn(250, |j, _| if j == 0 { 1.0 } else { 0.0 });
    let est: Vec<f64> = (0..200).map(|s| theory::sigma_contrast_estimator(&gaussian(500, 250, 900 + s), &v).unwrap()).collect();
    assert!((stats::mean(&est) - 1.0).abs() < 0.03);

    // kappa = 0.01: the correction is negligible
    let ds = gaussian(1000, 10, 5);
    let e1 = DVector::from_fn(10, |j, _| if j == 0 { 1.0 } else { 0.0 });
    let inv = (ds.x.transpose() * &ds.x / 1000.0).try_inverse().unwrap();
    let est = theory::sigma_contrast_estimator(&ds, &e1).unwrap();
    assert!((est / inv[(0, 0)] - 0.99).abs() < 1e-10);

    // Sigma = diag(4, 1, ...): v'Sigma^{-1}v = 1/4
    let mut est = 0.0;
    for s in 0..50 {
        let mut ds = gaussian(400, 20, 1200 + s);
        ds.x.column_mut(0).scale_mut(2.0);
        let v = DVector::from_fn(20, |j, _| if j == 0 { 1.0 } else { 0.0 });
        est += theory::sigma_contrast_estimator(&ds, &v).unwrap() / 50.0;
    }
    assert!((est - 0.25).abs() < 0.01, "{est}");
}

#[test]
#[ignore = "300 simulations at n = 500"]
fn asymptotic_interval_covers() {
    let v = DVector::from_fn(150, |j, _| if j == 0 { 1.0 } else { 0.0 });
    let mut miss = 0;
    for s in 0..300 {
        let ds = gaussian(500, 150, 3000 + s);
        let r = theory::r_hat_from_predicted(&ds, Loss::SquaredError).unwrap();
        let (lo, hi) = theory::asymptotic_ci(&ds, Loss::SquaredError, &v, r, 0.95).unwrap();
        miss += usize::from(!(lo <= 0.0 && 0.0 <= hi));
    }
    assert!((miss as f64 / 300.0 - 0.05).abs() < 0.03, "{miss}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn constant_weights_are_exact(kappa in 0.01f64..0.95) {
        let c = theory::solve_c(&WeightLaw::ConstantOne, kappa).unwrap();
        prop_assert!((c - kappa / (1.0 - kappa)).abs() < 1e-9 * (1.0 + c));
        let pred = theory::boot_var_prediction(&WeightLaw::ConstantOne, kappa, 1.0).unwrap();
        prop_assert!(pred.overestimation_factor.abs() < 1e-9);
    }

    #[test]
    fn predicted_variance_is_nonnegative(kappa in 0.02f64..0.9, alpha in 0.0f64..1.0) {
        let pred = theory::boot_var_prediction(&WeightLaw::PoissonMixture { alpha }, kappa, 1.0).unwrap();
        prop_assert!(pred.expected_boot_var_scaled >= 0.0);
        prop_assert!(pred.c > 0.0);
    }
}
