use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laws::ErrorLaw;
use crate::loss::Loss;
use crate::resample::{ReplicateStyle, Scheme};

/// Current configuration schema version.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Coverage,
    VarianceRatio,
    CiWidth,
    RelativeRisk,
}

impl Experiment {
    /// Metrics drawn by default for this experiment.
    pub fn plot_metrics(&self) -> &'static [&'static str] {
        match self {
            Experiment::Coverage => &["miscoverage"],
            Experiment::VarianceRatio => &["var_ratio_median", "var_ratio_mean"],
            Experiment::CiWidth => &["width_ratio"],
            Experiment::RelativeRisk => &["risk_ratio"],
        }
    }
}

/// Law of the row scale `lambda_i` of an elliptical design.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaLaw {
    /// Exponential with rate `sqrt(2)`, so `E[lambda^2] = 1`.
    ExpSqrt2,
    StdNormal,
    /// Uniform on `[0.5, 1.5]`.
    Unif,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignKind {
    GaussianIid,
    /// Iid double exponential entries with unit variance.
    DoubleExpIid,
    Elliptical(LambdaLaw),
}

impl fmt::Display for DesignKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DesignKind::GaussianIid => "gaussian",
            DesignKind::DoubleExpIid => "double_exp",
            DesignKind::Elliptical(LambdaLaw::ExpSqrt2) => "elliptical_exp",
            DesignKind::Elliptical(LambdaLaw::StdNormal) => "elliptical_normal",
            DesignKind::Elliptical(LambdaLaw::Unif) => "elliptical_unif",
        })
    }
}

impl FromStr for DesignKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => DesignKind::GaussianIid,
            "double_exp" | "laplace" => DesignKind::DoubleExpIid,
            "elliptical_exp" => DesignKind::Elliptical(LambdaLaw::ExpSqrt2),
            "elliptical_normal" => DesignKind::Elliptical(LambdaLaw::StdNormal),
            "elliptical_unif" => DesignKind::Elliptical(LambdaLaw::Unif),
            other => return Err(Error::Config(format!("unknown design '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JackknifeCorrection {
    None,
    /// Multiply by `1 - p/n`.
    Ls,
    /// Divide by `gamma_hat`.
    Gamma,
}

/// One inference procedure evaluated in every simulation.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Bootstrap(Scheme),
    /// Poisson mixture weights with `alpha` calibrated to each kappa.
    CalibratedWeights,
    Jackknife(JackknifeCorrection),
    /// Normal interval from the predicted-error risk estimate.
    Asymptotic,
    /// Classical least-squares normal interval.
    NormalTheory,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Bootstrap(s) => write!(f, "{s}"),
            Method::CalibratedWeights => f.write_str("weighted:calibrated"),
            Method::Jackknife(JackknifeCorrection::None) => f.write_str("jackknife"),
            Method::Jackknife(JackknifeCorrection::Ls) => f.write_str("jackknife_ls"),
            Method::Jackknife(JackknifeCorrection::Gamma) => f.write_str("jackknife_gamma"),
            Method::Asymptotic => f.write_str("asymptotic"),
            Method::NormalTheory => f.write_str("normal_theory"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "weighted:calibrated" => Method::CalibratedWeights,
            "jackknife" => Method::Jackknife(JackknifeCorrection::None),
            "jackknife_ls" => Method::Jackknife(JackknifeCorrection::Ls),
            "jackknife_gamma" => Method::Jackknife(JackknifeCorrection::Gamma),
            "asymptotic" => Method::Asymptotic,
            "normal_theory" => Method::NormalTheory,
            other => Method::Bootstrap(other.parse().map_err(|e: Error| Error::Config(e.to_string()))?),
        })
    }
}

/// A simulation sweep, read from TOML.
///
/// ```toml
/// schema = 1
/// experiment = "coverage"
/// n = 200
/// kappa_grid = [0.1, 0.3, 0.5]
/// design = "gaussian"
/// error_law = "normal"
/// loss = "l2"
/// schemes = ["residual_raw", "pairs", "jackknife_ls"]
/// n_sims = 300
/// B = 500
/// master_seed = 1
/// output_dir = "out/coverage"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub experiment: Experiment,
    pub n: usize,
    pub kappa_grid: Vec<f64>,
    #[serde(with = "text")]
    pub design: DesignKind,
    #[serde(with = "text")]
    pub error_law: ErrorLaw,
    #[serde(with = "text")]
    pub loss: Loss,
    #[serde(default, with = "text_list")]
    pub schemes: Vec<Method>,
    pub n_sims: usize,
    #[serde(rename = "B", alias = "b")]
    pub b: usize,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub replicate_style: ReplicateStyle,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    #[serde(default)]
    pub per_observation_noise: bool,
    #[serde(default = "default_plots")]
    pub plots: bool,
    /// Also write each simulated dataset to `data/` in the output directory.
    #[serde(default)]
    pub save_data: bool,
}

fn default_level() -> f64 {
    0.95
}

fn default_plots() -> bool {
    true
}

impl ExperimentConfig {
    /// A desk-scale config (n = 200, 300 simulations, B = 500) without output files.
    pub fn new(experiment: Experiment, kappa_grid: Vec<f64>, loss: Loss, schemes: Vec<Method>) -> Self {
        ExperimentConfig {
            schema: SCHEMA_VERSION,
            name: None,
            experiment,
            n: 200,
            kappa_grid,
            design: DesignKind::GaussianIid,
            error_law: ErrorLaw::std_normal(),
            loss,
            schemes,
            n_sims: 300,
            b: 500,
            master_seed: 0,
            output_dir: None,
            level: default_level(),
            replicate_style: ReplicateStyle::Fresh,
            bandwidth: None,
            per_observation_noise: false,
            plots: true,
            save_data: false,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Number of predictors used at `kappa`.
    pub fn p_for(&self, kappa: f64) -> usize {
        (self.n as f64 * kappa).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.schema != SCHEMA_VERSION {
            return bad(format!("unsupported schema {} (expected {SCHEMA_VERSION})", self.schema));
        }
        if self.kappa_grid.is_empty() {
            return bad("kappa_grid is empty".into());
        }
        for &k in &self.kappa_grid {
            if !(k > 0.0 && k < 1.0) {
                return bad(format!("kappa {k} is outside (0, 1)"));
            }
            let p = self.p_for(k);
            if p < 1 || p + 1 >= self.n {
                return bad(format!("kappa {k} gives p = {p}, need 1 <= p < n - 1 with n = {}", self.n));
            }
        }
        if self.n_sims == 0 {
            return bad("n_sims must be positive".into());
        }
        if self.experiment != Experiment::RelativeRisk {
            if self.schemes.is_empty() {
                return bad("schemes is empty".into());
            }
            let needs_b = self.schemes.iter().any(|m| matches!(m, Method::Bootstrap(_) | Method::CalibratedWeights));
            if needs_b && self.b < 2 {
                return bad("B must be at least 2".into());
            }
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level must lie in (0, 1), got {}", self.level));
        }
        if let Some(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return bad(format!("bandwidth must be positive, got {h}"));
            }
        }
        self.error_law.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

mod text {
    use std::fmt::Display;
    use std::str::FromStr;

    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }
}

mod text_list {
    use std::fmt::Display;
    use std::str::FromStr;

    use serde::ser::SerializeSeq;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(v: &[T], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for item in v {
            seq.serialize_element(&item.to_string())?;
        }
        seq.end()
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<Vec<T>, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| s.parse().map_err(de::Error::custom))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
schema = 1
experiment = "coverage"
n = 200
kappa_grid = [0.1, 0.5]
design = "elliptical_exp"
error_law = "laplace"
loss = "huber(1)"
schemes = ["residual_raw", "weighted:calibrated", "weighted:mixture:0.9", "jackknife_gamma"]
n_sims = 10
B = 50
master_seed = 7
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(cfg.design, DesignKind::Elliptical(LambdaLaw::ExpSqrt2));
        assert_eq!(cfg.loss, Loss::huber(1.0));
        assert_eq!(cfg.schemes[1], Method::CalibratedWeights);
        assert_eq!(cfg.schemes[3], Method::Jackknife(JackknifeCorrection::Gamma));
        assert_eq!(cfg.level, 0.95);
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml(&EXAMPLE.replace("schema = 1", "schema = 2")).is_err());
        assert!(ExperimentConfig::from_toml(&EXAMPLE.replace("[0.1, 0.5]", "[0.1, 1.0]")).is_err());
        assert!(ExperimentConfig::from_toml(&EXAMPLE.replace("[0.1, 0.5]", "[0.001]")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("{EXAMPLE}\ncolour = 1\n")).is_err());
        assert!(ExperimentConfig::from_toml(&EXAMPLE.replace("residual_raw", "bogus")).is_err());
    }
}
