//! Error distributions shared by the theory solvers and the simulation
//! generators.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorLaw {
    Normal { sd: f64 },
    /// Double exponential with density `exp(-|x|/scale) / (2 scale)`,
    /// variance `2 scale^2`.
    Laplace { scale: f64 },
    /// `base + N(0, noise_var)`, rescaled to the variance of `base`.
    ConvolvedNormal { base: Box<ErrorLaw>, noise_var: f64 },
}

impl ErrorLaw {
    pub fn std_normal() -> Self {
        ErrorLaw::Normal { sd: 1.0 }
    }

    /// The standard double exponential, with variance 2.
    pub fn std_laplace() -> Self {
        ErrorLaw::Laplace { scale: 1.0 }
    }

    pub fn convolved(base: ErrorLaw, noise_var: f64) -> Self {
        ErrorLaw::ConvolvedNormal { base: Box::new(base), noise_var }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            ErrorLaw::Normal { sd } => *sd >= 0.0 && sd.is_finite(),
            ErrorLaw::Laplace { scale } => *scale >= 0.0 && scale.is_finite(),
            ErrorLaw::ConvolvedNormal { base, noise_var } => {
                base.validate()?;
                *noise_var >= 0.0 && noise_var.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid error law {self}")))
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            ErrorLaw::Normal { sd } => sd * sd,
            ErrorLaw::Laplace { scale } => 2.0 * scale * scale,
            ErrorLaw::ConvolvedNormal { base, .. } => base.variance(),
        }
    }

    /// Quantile function, when available in closed form.
    pub fn quantile(&self, u: f64) -> Option<f64> {
        match self {
            ErrorLaw::Normal { sd } => Some(sd * stats::normal_quantile(u)),
            ErrorLaw::Laplace { scale } => Some(if u < 0.5 {
                scale * (2.0 * u).ln()
            } else {
                -scale * (2.0 * (1.0 - u)).ln()
            }),
            ErrorLaw::ConvolvedNormal { .. } => None,
        }
    }

    pub fn sample(&self, rng: &mut StreamRng) -> f64 {
        match self {
            ErrorLaw::Normal { sd } => {
                let z: f64 = StandardNormal.sample(rng);
                sd * z
            }
            ErrorLaw::Laplace { .. } => {
                // open interval keeps the logarithm finite
                let u: f64 = rng.random_range(f64::EPSILON..1.0 - f64::EPSILON);
                self.quantile(u).expect("closed form")
            }
            ErrorLaw::ConvolvedNormal { base, noise_var } => {
                let v = base.variance();
                let z: f64 = StandardNormal.sample(rng);
                let raw = base.sample(rng) + noise_var.sqrt() * z;
                if v + noise_var > 0.0 {
                    raw * (v / (v + noise_var)).sqrt()
                } else {
                    0.0
                }
            }
        }
    }

    pub fn fill(&self, rng: &mut StreamRng, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.sample(rng);
        }
    }
}

impl fmt::Display for ErrorLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErrorLaw::Normal { sd } if *sd == 1.0 => write!(f, "normal"),
            ErrorLaw::Normal { sd } => write!(f, "normal({sd})"),
            ErrorLaw::Laplace { scale } if *scale == 1.0 => write!(f, "laplace"),
            ErrorLaw::Laplace { scale } => write!(f, "laplace({scale})"),
            ErrorLaw::ConvolvedNormal { base, noise_var } => write!(f, "conv({base},{noise_var})"),
        }
    }
}

/// Parses `normal`, `normal(<sd>)`, `laplace` and `laplace(<scale>)`.
impl FromStr for ErrorLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (name, arg) = match s.split_once('(') {
            Some((name, rest)) => {
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| Error::InvalidInput(format!("unbalanced parenthesis in '{s}'")))?;
                let v = inner
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidInput(format!("bad parameter in '{s}'")))?;
                (name.trim().to_string(), Some(v))
            }
            None => (s.clone(), None),
        };
        let law = match name.as_str() {
            "normal" | "gaussian" | "std_normal" => ErrorLaw::Normal { sd: arg.unwrap_or(1.0) },
            "laplace" | "double_exponential" | "std_laplace" => {
                ErrorLaw::Laplace { scale: arg.unwrap_or(1.0) }
            }
            _ => return Err(Error::InvalidInput(format!("unknown error law '{s}'"))),
        };
        law.validate()?;
        Ok(law)
    }
}
