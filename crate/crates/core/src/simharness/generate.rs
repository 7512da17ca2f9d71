use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use super::config::{DesignKind, LambdaLaw};
use crate::laws::ErrorLaw;
use crate::rng::{self, StreamRng};

const DESIGN_TAG: u64 = rng::tag("design");
const LAMBDA_TAG: u64 = rng::tag("lambda");
const ERRORS_TAG: u64 = rng::tag("errors");

/// Row scales of an elliptical design.
pub fn gen_lambda(law: LambdaLaw, n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, LAMBDA_TAG, 0);
    match law {
        LambdaLaw::ExpSqrt2 => {
            let exp = Exp::new(std::f64::consts::SQRT_2).expect("positive rate");
            (0..n).map(|_| exp.sample(&mut r)).collect()
        }
        LambdaLaw::StdNormal => (0..n).map(|_| StandardNormal.sample(&mut r)).collect(),
        LambdaLaw::Unif => (0..n).map(|_| r.random_range(0.5..1.5)).collect(),
    }
}

fn unit_laplace(r: &mut StreamRng) -> f64 {
    let u: f64 = r.random_range(f64::EPSILON..1.0 - f64::EPSILON);
    let b = std::f64::consts::FRAC_1_SQRT_2;
    if u < 0.5 {
        b * (2.0 * u).ln()
    } else {
        -b * (2.0 * (1.0 - u)).ln()
    }
}

/// An `n x p` design with iid rows of the given kind.
pub fn gen_design(kind: DesignKind, n: usize, p: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng::stream(seed, DESIGN_TAG, 0);
    let mut rows = vec![0.0; n * p];
    match kind {
        DesignKind::GaussianIid => rows.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut r)),
        DesignKind::DoubleExpIid => rows.iter_mut().for_each(|v| *v = unit_laplace(&mut r)),
        DesignKind::Elliptical(law) => {
            let lambda = gen_lambda(law, n, seed);
            for (row, l) in rows.chunks_mut(p.max(1)).zip(&lambda) {
                for v in row {
                    let z: f64 = StandardNormal.sample(&mut r);
                    *v = l * z;
                }
            }
        }
    }
    DMatrix::from_row_slice(n, p, &rows)
}

pub fn gen_errors(law: &ErrorLaw, n: usize, seed: u64) -> DVector<f64> {
    let mut r = rng::stream(seed, ERRORS_TAG, 0);
    let mut out = vec![0.0; n];
    law.fill(&mut r, &mut out);
    DVector::from_vec(out)
}
