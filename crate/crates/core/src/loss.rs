//! Convex regression losses.
//!
//! Every loss is normalized so that `psi = rho'` is the identity near zero
//! for the quadratic pieces: squared error is `x^2 / 2`, Huber is quadratic
//! on `|x| <= k`, and the smoothed absolute loss is `|x|` with its kink
//! replaced by a parabola of width `eta`.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Default Huber transition point.
pub const HUBER_K: f64 = 1.345;

/// Smoothing width used when the exact absolute loss is fitted by IRLS.
pub const L1_SMOOTHING: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Loss {
    SquaredError,
    Huber { k: f64 },
    AbsoluteError,
    SmoothedAbsolute { eta: f64 },
}

impl Default for Loss {
    fn default() -> Self {
        Loss::Huber { k: HUBER_K }
    }
}

impl Loss {
    pub fn huber(k: f64) -> Self {
        assert!(k > 0.0, "Huber transition point must be positive");
        Loss::Huber { k }
    }

    pub fn smoothed_absolute(eta: f64) -> Self {
        assert!(eta > 0.0, "smoothing width must be positive");
        Loss::SmoothedAbsolute { eta }
    }

    pub fn rho(&self, x: f64) -> f64 {
        let a = x.abs();
        match *self {
            Loss::SquaredError => 0.5 * x * x,
            Loss::Huber { k } => {
                if a <= k {
                    0.5 * x * x
                } else {
                    k * a - 0.5 * k * k
                }
            }
            Loss::AbsoluteError => a,
            Loss::SmoothedAbsolute { eta } => {
                if a <= eta {
                    0.5 * x * x / eta
                } else {
                    a - 0.5 * eta
                }
            }
        }
    }

    pub fn psi(&self, x: f64) -> f64 {
        match *self {
            Loss::SquaredError => x,
            Loss::Huber { k } => x.clamp(-k, k),
            Loss::AbsoluteError => {
                if x == 0.0 {
                    0.0
                } else {
                    x.signum()
                }
            }
            Loss::SmoothedAbsolute { eta } => (x / eta).clamp(-1.0, 1.0),
        }
    }

    /// Derivative of `psi`, extended at kinks: Huber uses `1{|x| <= k}` and the
    /// absolute loss uses `1{x = 0}`.
    pub fn psi_prime(&self, x: f64) -> f64 {
        match *self {
            Loss::SquaredError => 1.0,
            Loss::Huber { k } => {
                if x.abs() <= k {
                    1.0
                } else {
                    0.0
                }
            }
            Loss::AbsoluteError => {
                if x == 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Loss::SmoothedAbsolute { eta } => {
                if x.abs() <= eta {
                    1.0 / eta
                } else {
                    0.0
                }
            }
        }
    }

    /// IRLS weight `psi(x) / x`. The absolute loss is clamped at
    /// `max(|x|, L1_SMOOTHING)`, which makes it the weight of the smoothed loss.
    pub fn irls_weight(&self, x: f64) -> f64 {
        let a = x.abs();
        match *self {
            Loss::SquaredError => 1.0,
            Loss::Huber { k } => {
                if a <= k {
                    1.0
                } else {
                    k / a
                }
            }
            Loss::AbsoluteError => 1.0 / a.max(L1_SMOOTHING),
            Loss::SmoothedAbsolute { eta } => 1.0 / a.max(eta),
        }
    }

    /// Moreau proximal map of `c * rho`: `argmin_z c*rho(z) + (z - x)^2 / 2`.
    pub fn prox(&self, c: f64, x: f64) -> f64 {
        let a = x.abs();
        match *self {
            Loss::SquaredError => x / (1.0 + c),
            Loss::Huber { k } => {
                if a <= k * (1.0 + c) {
                    x / (1.0 + c)
                } else {
                    x - c * k * x.signum()
                }
            }
            Loss::AbsoluteError => {
                if a <= c {
                    0.0
                } else {
                    x - c * x.signum()
                }
            }
            Loss::SmoothedAbsolute { eta } => {
                if a <= eta + c {
                    x * eta / (eta + c)
                } else {
                    x - c * x.signum()
                }
            }
        }
    }

    /// Derivative in `x` of the proximal map (almost everywhere).
    pub fn prox_derivative(&self, c: f64, x: f64) -> f64 {
        let a = x.abs();
        match *self {
            Loss::SquaredError => 1.0 / (1.0 + c),
            Loss::Huber { k } => {
                if a <= k * (1.0 + c) {
                    1.0 / (1.0 + c)
                } else {
                    1.0
                }
            }
            Loss::AbsoluteError => {
                if a <= c {
                    0.0
                } else {
                    1.0
                }
            }
            Loss::SmoothedAbsolute { eta } => {
                if a <= eta + c {
                    eta / (eta + c)
                } else {
                    1.0
                }
            }
        }
    }

    /// Loss actually minimized by the iterative solver.
    pub(crate) fn solver_loss(&self) -> Loss {
        match *self {
            Loss::AbsoluteError => Loss::SmoothedAbsolute { eta: L1_SMOOTHING },
            other => other,
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self, Loss::SquaredError)
    }

    pub fn name(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Loss::SquaredError => write!(f, "l2"),
            Loss::Huber { k } => write!(f, "huber({k})"),
            Loss::AbsoluteError => write!(f, "l1"),
            Loss::SmoothedAbsolute { eta } => write!(f, "l1_smoothed({eta})"),
        }
    }
}

/// Parses `l2`, `huber`, `huber(1.0)`, `l1`, `l1_smoothed`, `l1_smoothed(0.01)`.
impl FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        let (name, arg) = match s.find('(') {
            Some(open) if s.ends_with(')') => {
                let inner = &s[open + 1..s.len() - 1];
                let value: f64 = inner
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad loss parameter in '{s}'")))?;
                (&s[..open], Some(value))
            }
            _ => (s.as_str(), None),
        };
        let positive = |v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(Error::InvalidInput(format!("loss parameter must be positive, got {v}")))
            }
        };
        match name {
            "l2" | "ls" | "squared" => Ok(Loss::SquaredError),
            "huber" => Ok(Loss::Huber { k: positive(arg.unwrap_or(HUBER_K))? }),
            "l1" | "lad" | "absolute" => Ok(Loss::AbsoluteError),
            "l1_smoothed" | "smoothed_l1" => Ok(Loss::SmoothedAbsolute {
                eta: positive(arg.unwrap_or(DEFAULT_SMOOTHED_ETA))?,
            }),
            _ => Err(Error::InvalidInput(format!("unknown loss '{s}'"))),
        }
    }
}

/// Smoothing width used by `l1_smoothed` when none is given.
pub const DEFAULT_SMOOTHED_ETA: f64 = 1e-2;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ALL: [Loss; 5] = [
        Loss::SquaredError,
        Loss::Huber { k: 1.345 },
        Loss::Huber { k: 1.0 },
        Loss::AbsoluteError,
        Loss::SmoothedAbsolute { eta: 0.05 },
    ];

    #[test]
    fn basic_shape() {
        for loss in ALL {
            assert_eq!(loss.rho(0.0), 0.0);
            for &x in &[0.3, 1.2, 4.0] {
                assert!(loss.rho(x) >= 0.0);
                assert_eq!(loss.psi(-x), -loss.psi(x));
                assert_eq!(loss.rho(-x), loss.rho(x));
            }
        }
    }

    #[test]
    fn psi_prime_conventions() {
        let h = Loss::huber(1.345);
        assert_eq!(h.psi_prime(1.345), 1.0);
        assert_eq!(h.psi_prime(1.35), 0.0);
        assert_eq!(Loss::AbsoluteError.psi_prime(0.0), 1.0);
        assert_eq!(Loss::AbsoluteError.psi_prime(1e-300), 0.0);
    }

    #[test]
    fn squared_error_prox_is_shrinkage() {
        for &c in &[0.0, 0.5, 3.0] {
            for &x in &[-2.0, 0.0, 0.7] {
                assert_eq!(Loss::SquaredError.prox(c, x), x / (1.0 + c));
            }
        }
    }

    #[test]
    fn moreau_identity_on_grid() {
        // x = prox(x) + c * psi(prox(x)) for every differentiable loss
        let losses = [
            Loss::SquaredError,
            Loss::Huber { k: 1.345 },
            Loss::Huber { k: 1.0 },
            Loss::SmoothedAbsolute { eta: 0.05 },
            Loss::SmoothedAbsolute { eta: 1e-8 },
        ];
        for loss in losses {
            for ci in 0..40 {
                let c = 0.01 * 1.3f64.powi(ci);
                for xi in -200..=200 {
                    let x = xi as f64 * 0.05;
                    let z = loss.prox(c, x);
                    let back = z + c * loss.psi(z);
                    assert!(
                        (back - x).abs() <= 1e-10 * (1.0 + x.abs()),
                        "{loss} c={c} x={x}: {back}"
                    );
                }
            }
        }
        // the absolute loss satisfies it off the dead zone, where psi is single valued
        for &c in &[0.1, 1.0, 2.5] {
            for xi in -100..=100 {
                let x = xi as f64 * 0.1;
                let z = Loss::AbsoluteError.prox(c, x);
                if z != 0.0 {
                    assert!((z + c * Loss::AbsoluteError.psi(z) - x).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn parse_round_trip() {
        assert_eq!("l2".parse::<Loss>().unwrap(), Loss::SquaredError);
        assert_eq!("huber".parse::<Loss>().unwrap(), Loss::Huber { k: 1.345 });
        assert_eq!("Huber(1)".parse::<Loss>().unwrap(), Loss::Huber { k: 1.0 });
        assert_eq!(
            "l1_smoothed(0.001)".parse::<Loss>().unwrap(),
            Loss::SmoothedAbsolute { eta: 0.001 }
        );
        assert!("huber(-1)".parse::<Loss>().is_err());
        assert!("cauchy".parse::<Loss>().is_err());
        for loss in ALL {
            assert_eq!(loss.to_string().parse::<Loss>().unwrap(), loss);
        }
    }

    proptest! {
        #[test]
        fn prox_minimizes_the_envelope(x in -20.0f64..20.0, c in 0.001f64..50.0, idx in 0usize..5) {
            let loss = ALL[idx];
            let z = loss.prox(c, x);
            let obj = |t: f64| c * loss.rho(t) + 0.5 * (t - x).powi(2);
            let best = obj(z);
            for d in [-1e-3, -1e-6, 1e-6, 1e-3] {
                prop_assert!(best <= obj(z + d) + 1e-12);
            }
        }

        #[test]
        fn rho_is_convex(a in -10.0f64..10.0, b in -10.0f64..10.0, t in 0.0f64..1.0, idx in 0usize..5) {
            let loss = ALL[idx];
            let mid = loss.rho(t * a + (1.0 - t) * b);
            prop_assert!(mid <= t * loss.rho(a) + (1.0 - t) * loss.rho(b) + 1e-12);
        }
    }
}
