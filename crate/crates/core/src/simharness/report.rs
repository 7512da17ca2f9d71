use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// First relative-risk pass estimating the risk under the true law.
    Pilot,
    Main,
}

/// Outcome of one method in one simulation; one line of `sims.jsonl`.
///
/// The truth is `beta = 0`, so `point` is also the estimation error of the
/// first coordinate. Numeric fields are `None` when the simulation or the
/// method failed, with the reason in `error`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub stage: Stage,
    pub kappa: f64,
    pub p: usize,
    pub sim: usize,
    pub method: String,
    pub point: Option<f64>,
    /// `||beta_hat||^2`.
    pub beta_sq_norm: Option<f64>,
    /// Width of the least-squares normal-theory interval on the same data.
    pub normal_width: Option<f64>,
    pub ci: Option<[f64; 2]>,
    pub covered: Option<bool>,
    /// Bootstrap or (corrected) jackknife variance.
    pub variance: Option<f64>,
    pub gamma_hat: Option<f64>,
    pub failed_replicates: usize,
    pub redraws: usize,
    pub error: Option<String>,
}

impl SimRecord {
    pub fn empty(stage: Stage, kappa: f64, p: usize, sim: usize, method: String) -> Self {
        SimRecord {
            stage,
            kappa,
            p,
            sim,
            method,
            point: None,
            beta_sq_norm: None,
            normal_width: None,
            ci: None,
            covered: None,
            variance: None,
            gamma_hat: None,
            failed_replicates: 0,
            redraws: 0,
            error: None,
        }
    }

    pub fn width(&self) -> Option<f64> {
        self.ci.map(|[lo, hi]| hi - lo)
    }
}

/// One cell of `report.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub kappa: f64,
    pub scheme: String,
    pub loss: String,
    pub metric: String,
    pub value: f64,
    pub se: f64,
    pub n_sims: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub rows: Vec<ReportRow>,
    pub records: Vec<SimRecord>,
}

impl SimReport {
    pub fn get(&self, kappa: f64, scheme: &str, metric: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| (r.kappa - kappa).abs() < 1e-12 && r.scheme == scheme && r.metric == metric)
    }

    pub fn value(&self, kappa: f64, scheme: &str, metric: &str) -> Option<f64> {
        self.get(kappa, scheme, metric).map(|r| r.value)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_report_csv(&self.rows, out)
    }
}

pub fn write_report_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report_csv<R: Read>(input: R) -> Result<Vec<ReportRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(csv_error))
        .collect()
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidInput(format!("malformed report csv: {other:?}")),
    }
}

struct Summary {
    mean: f64,
    se: f64,
    m: usize,
}

fn summarize(xs: &[f64]) -> Summary {
    let m = xs.len();
    let se = if m > 1 { (stats::sample_variance(xs) / m as f64).sqrt() } else { f64::NAN };
    Summary { mean: stats::mean(xs), se, m }
}

/// Quantile with a distribution-free standard error: half the distance
/// between the order statistics one binomial sd either side of `m q`.
fn quantile_with_se(xs: &[f64], q: f64) -> (f64, f64) {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() as f64;
    let spread = (m * q * (1.0 - q)).sqrt();
    let last = v.len() - 1;
    let lo = ((m * q - spread).floor().max(0.0) as usize).min(last);
    let hi = ((m * q + spread).ceil().max(0.0) as usize).min(last);
    (stats::quantile_sorted(&v, q), 0.5 * (v[hi] - v[lo]))
}

/// Ratio of means `mean(a) / mean(b)` for paired samples with its delta-method SE.
fn ratio_of_means(a: &[f64], b: &[f64]) -> (f64, f64) {
    let m = a.len() as f64;
    let (ma, mb) = (stats::mean(a), stats::mean(b));
    let r = ma / mb;
    if a.len() < 2 {
        return (r, f64::NAN);
    }
    let resid: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - r * y).collect();
    let s2 = resid.iter().map(|d| d * d).sum::<f64>() / (m - 1.0);
    (r, (s2 / m).sqrt() / mb.abs())
}

fn key(kappa: f64) -> u64 {
    kappa.to_bits()
}

/// Aggregates per-simulation records into report rows, ordered by kappa and
/// then by the method order of `methods`.
pub fn aggregate(records: &[SimRecord], methods: &[String], loss: &str) -> Vec<ReportRow> {
    let mut by_kappa: BTreeMap<u64, Vec<&SimRecord>> = BTreeMap::new();
    for r in records {
        by_kappa.entry(key(r.kappa)).or_default().push(r);
    }
    let mut kappas: Vec<f64> = by_kappa.keys().map(|&k| f64::from_bits(k)).collect();
    kappas.sort_by(f64::total_cmp);

    let mut rows = Vec::new();
    for kappa in kappas {
        let recs = &by_kappa[&key(kappa)];
        let row = |scheme: &str, metric: &str, value: f64, se: f64, n: usize| ReportRow {
            kappa,
            scheme: scheme.to_string(),
            loss: loss.to_string(),
            metric: metric.to_string(),
            value,
            se,
            n_sims: n,
        };

        // empirical variance of a coordinate, pooled over all p coordinates
        let mut per_sim: BTreeMap<usize, f64> = BTreeMap::new();
        for r in recs.iter().filter(|r| r.stage == Stage::Main) {
            if let Some(b) = r.beta_sq_norm {
                per_sim.entry(r.sim).or_insert(b / r.p as f64);
            }
        }
        let pooled: Vec<f64> = per_sim.values().copied().collect();
        let emp = summarize(&pooled);
        let is_risk = recs.iter().any(|r| r.stage == Stage::Pilot || r.method == "G");
        if !is_risk && emp.m > 0 {
            rows.push(row("empirical", "coef_variance", emp.mean, emp.se, emp.m));
        }

        if is_risk {
            rows.extend(risk_rows(recs, &row));
            continue;
        }

        for method in methods {
            let mine: Vec<&SimRecord> = recs
                .iter()
                .copied()
                .filter(|r| r.stage == Stage::Main && &r.method == method && r.error.is_none())
                .collect();
            if mine.is_empty() {
                continue;
            }
            let attempted = recs.iter().filter(|r| r.stage == Stage::Main && &r.method == method).count();
            let failures = (attempted - mine.len()) as f64 / attempted as f64;
            rows.push(row(method, "failure_rate", failures, stats::proportion_se(failures, attempted), attempted));

            let covered: Vec<f64> = mine.iter().filter_map(|r| r.covered).map(|c| if c { 0.0 } else { 1.0 }).collect();
            if !covered.is_empty() {
                let rate = stats::mean(&covered);
                rows.push(row(method, "miscoverage", rate, stats::proportion_se(rate, covered.len()), covered.len()));
            }

            let variances: Vec<f64> = mine.iter().filter_map(|r| r.variance).collect();
            if !variances.is_empty() && emp.m > 1 && emp.mean > 0.0 {
                let v = summarize(&variances);
                let r = v.mean / emp.mean;
                let se = (v.se.powi(2) + (r * emp.se).powi(2)).sqrt() / emp.mean;
                rows.push(row(method, "var_ratio_mean", r, se, v.m));
                for (metric, q) in [("var_ratio_q1", 0.25), ("var_ratio_median", 0.5), ("var_ratio_q3", 0.75)] {
                    let (value, se) = quantile_with_se(&variances, q);
                    rows.push(row(method, metric, value / emp.mean, se / emp.mean, v.m));
                }
            }

            let pairs: Vec<(f64, f64)> =
                mine.iter().filter_map(|r| Some((r.width()?, r.normal_width?))).collect();
            if !pairs.is_empty() {
                let (w, nw): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
                let s = summarize(&w);
                rows.push(row(method, "mean_width", s.mean, s.se, s.m));
                let (r, se) = ratio_of_means(&w, &nw);
                rows.push(row(method, "width_ratio", r, se, s.m));
            }

            let gammas: Vec<f64> = mine.iter().filter_map(|r| r.gamma_hat).collect();
            if !gammas.is_empty() {
                let s = summarize(&gammas);
                rows.push(row(method, "gamma_hat_mean", s.mean, s.se, s.m));
            }

            let failed: Vec<f64> = mine.iter().map(|r| r.failed_replicates as f64).collect();
            let s = summarize(&failed);
            rows.push(row(method, "failed_replicates", s.mean, s.se, s.m));
            let redraws: Vec<f64> = mine.iter().map(|r| r.redraws as f64).collect();
            let s = summarize(&redraws);
            rows.push(row(method, "redraws", s.mean, s.se, s.m));
        }
    }
    rows
}

/// Rows of the relative-risk experiment: the mean squared risk of each arm
/// and the risk ratios `r(G_arm) / r(G)` on common random numbers.
fn risk_rows(
    recs: &[&SimRecord],
    row: &dyn Fn(&str, &str, f64, f64, usize) -> ReportRow,
) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    let pilot: Vec<f64> = recs
        .iter()
        .filter(|r| r.stage == Stage::Pilot)
        .filter_map(|r| r.beta_sq_norm)
        .collect();
    if !pilot.is_empty() {
        let s = summarize(&pilot);
        rows.push(row("pilot", "risk_sq", s.mean, s.se, s.m));
    }
    let mut arms: BTreeMap<usize, BTreeMap<&str, f64>> = BTreeMap::new();
    for r in recs.iter().filter(|r| r.stage == Stage::Main) {
        if let Some(b) = r.beta_sq_norm {
            arms.entry(r.sim).or_default().insert(r.method.as_str(), b);
        }
    }
    let base: Vec<f64> = arms.values().filter_map(|a| a.get("G").copied()).collect();
    if !base.is_empty() {
        let s = summarize(&base);
        rows.push(row("G", "risk_sq", s.mean, s.se, s.m));
    }
    for arm in ["G_conv", "G_norm"] {
        let (a, g): (Vec<f64>, Vec<f64>) = arms
            .values()
            .filter_map(|m| Some((*m.get(arm)?, *m.get("G")?)))
            .unzip();
        if a.is_empty() {
            continue;
        }
        let s = summarize(&a);
        rows.push(row(arm, "risk_sq", s.mean, s.se, s.m));
        let (ratio_sq, se_sq) = ratio_of_means(&a, &g);
        let ratio = ratio_sq.sqrt();
        rows.push(row(arm, "risk_ratio", ratio, se_sq / (2.0 * ratio), a.len()));
    }
    rows
}
