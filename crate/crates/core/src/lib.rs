//! M-estimation and resampling inference for linear regression when the
//! number of predictors is a sizable fraction of the sample size.
//!
//! The crate covers robust regression fits ([`mestim`]), residual, pairs and
//! weighted bootstraps plus the jackknife ([`resample`]), a deconvolution
//! based residual bootstrap ([`deconv`]), the limiting theory that predicts
//! how these procedures behave as `p/n -> kappa` ([`theory`]), and a
//! configuration driven simulation harness ([`simharness`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod deconv;
pub mod error;
pub mod laws;
mod lad;
pub mod linalg;
pub mod loss;
pub mod mestim;
pub mod resample;
pub mod rng;
pub mod simharness;
pub mod stats;
pub mod theory;

pub use error::{Error, Result};
pub use loss::Loss;
pub use mestim::{Dataset, FitOptions, FitResult, PredictedErrors};
pub use resample::{BootstrapOutcome, JackknifeOutcome, ResamplingPlan, Scheme, WeightLaw};
