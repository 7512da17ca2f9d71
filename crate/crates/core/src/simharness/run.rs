use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::config::{Experiment, ExperimentConfig, JackknifeCorrection, Method};
use super::generate::{gen_design, gen_errors};
use super::report::{aggregate, write_report_csv, SimRecord, SimReport, Stage};
use super::svg::write_plots;
use crate::error::{Error, Result};
use crate::mestim::{self, Dataset, FitContext};
use crate::resample::{self, normal_ci, ResamplingPlan, Scheme, WeightLaw};
use crate::rng;
use crate::stats;
use crate::theory;

pub const SIMS_FILE: &str = "sims.jsonl";
pub const REPORT_FILE: &str = "report.csv";
pub const CONFIG_FILE: &str = "config.toml";

const RISK_ARMS: [&str; 3] = ["G", "G_conv", "G_norm"];

/// Seed of simulation `sim` at `kappa`; data and resampling draws derive from it.
pub fn sim_seed(master: u64, stage: Stage, kappa: f64, sim: usize) -> u64 {
    let stage_tag = match stage {
        Stage::Pilot => rng::tag("pilot"),
        Stage::Main => rng::tag("main"),
    };
    let per_kappa = rng::derive_seed(master, stage_tag, kappa.to_bits());
    rng::derive_seed(per_kappa, rng::tag("sim"), sim as u64)
}

/// Where `save_data` puts the dataset of simulation `sim` at `kappa`.
pub fn data_path(dir: &Path, kappa: f64, sim: usize) -> PathBuf {
    dir.join("data").join(format!("kappa{kappa}_sim{sim}.csv"))
}

/// Data of one simulation: `y = eps` since the truth is `beta = 0`.
pub fn sim_dataset(cfg: &ExperimentConfig, p: usize, seed: u64) -> Result<Dataset> {
    let x = gen_design(cfg.design, cfg.n, p, seed);
    let y = gen_errors(&cfg.error_law, cfg.n, seed);
    Ok(Dataset::new(x, y)?.with_truth(vec![0.0; p], cfg.error_law.variance().sqrt()))
}

pub fn run_coverage(config: &ExperimentConfig) -> Result<SimReport> {
    run(&ExperimentConfig { experiment: Experiment::Coverage, ..config.clone() })
}

pub fn run_variance_ratio(config: &ExperimentConfig) -> Result<SimReport> {
    run(&ExperimentConfig { experiment: Experiment::VarianceRatio, ..config.clone() })
}

pub fn run_ci_width(config: &ExperimentConfig) -> Result<SimReport> {
    run(&ExperimentConfig { experiment: Experiment::CiWidth, ..config.clone() })
}

pub fn run_relative_risk(config: &ExperimentConfig) -> Result<SimReport> {
    run(&ExperimentConfig { experiment: Experiment::RelativeRisk, ..config.clone() })
}

/// Runs the sweep described by `config`. With an `output_dir`, records are
/// appended to `sims.jsonl` as simulations finish, an interrupted sweep
/// resumes from the complete simulations already logged, and `report.csv`
/// (plus plots when enabled) is written at the end.
pub fn run(config: &ExperimentConfig) -> Result<SimReport> {
    config.validate()?;
    let mut sink = Sink::open(config)?;
    let loss = config.loss.to_string();
    let (records, methods) = if config.experiment == Experiment::RelativeRisk {
        let pilot = run_stage(config, Stage::Pilot, &["pilot".to_string()], &mut sink, |kappa, p, sim| {
            risk_sim(config, Stage::Pilot, kappa, p, sim, None)
        })?;
        let mut r_sq: HashMap<u64, f64> = HashMap::new();
        for &kappa in &config.kappa_grid {
            let vals: Vec<f64> = pilot
                .iter()
                .filter(|r| r.kappa == kappa)
                .filter_map(|r| r.beta_sq_norm)
                .collect();
            if !vals.is_empty() {
                r_sq.insert(kappa.to_bits(), stats::mean(&vals));
            }
        }
        let arms: Vec<String> = RISK_ARMS.iter().map(|s| s.to_string()).collect();
        let main = run_stage(config, Stage::Main, &arms, &mut sink, |kappa, p, sim| {
            risk_sim(config, Stage::Main, kappa, p, sim, r_sq.get(&kappa.to_bits()).copied())
        })?;
        let mut all = pilot;
        all.extend(main);
        (all, arms)
    } else {
        let names: Vec<String> = config.schemes.iter().map(|m| m.to_string()).collect();
        let alphas: HashMap<u64, std::result::Result<f64, String>> = config
            .kappa_grid
            .iter()
            .filter(|_| config.schemes.contains(&Method::CalibratedWeights))
            .map(|&k| (k.to_bits(), theory::calibrate_alpha(k).map_err(|e| e.to_string())))
            .collect();
        let records = run_stage(config, Stage::Main, &names, &mut sink, |kappa, p, sim| {
            sweep_sim(config, kappa, p, sim, alphas.get(&kappa.to_bits()))
        })?;
        (records, names)
    };
    sink.finish()?;

    let rows = aggregate(&records, &methods, &loss);
    if let Some(dir) = &config.output_dir {
        write_report_csv(&rows, BufWriter::new(File::create(dir.join(REPORT_FILE))?))?;
        if config.plots {
            write_plots(&rows, dir, config.experiment.plot_metrics())?;
        }
    }
    Ok(SimReport { rows, records })
}

fn run_stage<F>(
    cfg: &ExperimentConfig,
    stage: Stage,
    methods: &[String],
    sink: &mut Sink,
    per_sim: F,
) -> Result<Vec<SimRecord>>
where
    F: Fn(f64, usize, usize) -> Vec<SimRecord> + Sync,
{
    let chunk = (2 * rayon::current_num_threads()).max(2);
    let mut out = Vec::new();
    for &kappa in &cfg.kappa_grid {
        let p = cfg.p_for(kappa);
        let mut done = 0;
        for start in (0..cfg.n_sims).step_by(chunk) {
            let end = (start + chunk).min(cfg.n_sims);
            let mut todo = Vec::new();
            let mut batch: Vec<Option<Vec<SimRecord>>> = Vec::with_capacity(end - start);
            for sim in start..end {
                match sink.take_done(stage, kappa, sim, methods) {
                    Some(recs) => batch.push(Some(recs)),
                    None => {
                        todo.push(sim);
                        batch.push(None);
                    }
                }
            }
            let fresh: Vec<Vec<SimRecord>> = todo.par_iter().map(|&sim| per_sim(kappa, p, sim)).collect();
            let mut fresh = fresh.into_iter();
            for slot in batch {
                let recs = match slot {
                    Some(recs) => recs,
                    None => {
                        let recs = fresh.next().expect("one result per pending simulation");
                        sink.append(&recs)?;
                        recs
                    }
                };
                out.extend(recs);
            }
            done += end - start;
            log::debug!("kappa {kappa}: {done}/{} simulations", cfg.n_sims);
        }
        log::info!("{stage:?} stage, kappa {kappa} (p = {p}) finished");
    }
    Ok(out)
}

struct MethodOutcome {
    ci: (f64, f64),
    variance: f64,
    gamma_hat: Option<f64>,
    failed: usize,
    redraws: usize,
}

fn sweep_sim(
    cfg: &ExperimentConfig,
    kappa: f64,
    p: usize,
    sim: usize,
    alpha: Option<&std::result::Result<f64, String>>,
) -> Vec<SimRecord> {
    let seed = sim_seed(cfg.master_seed, Stage::Main, kappa, sim);
    let blank = |m: &Method| SimRecord::empty(Stage::Main, kappa, p, sim, m.to_string());
    let fail_all = |msg: String| -> Vec<SimRecord> {
        log::warn!("kappa {kappa}, simulation {sim}: {msg}");
        cfg.schemes
            .iter()
            .map(|m| SimRecord { error: Some(msg.clone()), ..blank(m) })
            .collect()
    };
    let ds = match sim_dataset(cfg, p, seed) {
        Ok(ds) => ds,
        Err(e) => return fail_all(e.to_string()),
    };
    if let (true, Some(dir)) = (cfg.save_data, &cfg.output_dir) {
        let path = data_path(dir, kappa, sim);
        let written = fs::create_dir_all(dir.join("data"))
            .map_err(Error::from)
            .and_then(|_| ds.write_csv(BufWriter::new(File::create(&path)?)));
        if let Err(e) = written {
            log::warn!("could not write {}: {e}", path.display());
        }
    }
    let ctx = match FitContext::fit(&ds, cfg.loss) {
        Ok(ctx) if ctx.full.converged => ctx,
        Ok(_) => return fail_all("full-data fit did not converge".into()),
        Err(e) => return fail_all(e.to_string()),
    };
    let mut v = DVector::zeros(p);
    v[0] = 1.0;
    let z = stats::two_sided_z(cfg.level);
    let normal_width = resample::normal_theory_variance(&ds, &v).ok().map(|s2| 2.0 * z * s2.sqrt());
    let boot_seed = rng::derive_seed(seed, rng::tag("resample"), 0);

    cfg.schemes
        .iter()
        .map(|method| {
            let mut rec = SimRecord {
                point: Some(ctx.full.beta_hat[0]),
                beta_sq_norm: Some(ctx.full.beta_hat.norm_squared()),
                normal_width,
                ..blank(method)
            };
            match run_method(cfg, &ctx, &v, method, alpha, boot_seed) {
                Ok(o) => {
                    rec.ci = Some([o.ci.0, o.ci.1]);
                    rec.covered = Some(o.ci.0 <= 0.0 && 0.0 <= o.ci.1);
                    rec.variance = Some(o.variance);
                    rec.gamma_hat = o.gamma_hat;
                    rec.failed_replicates = o.failed;
                    rec.redraws = o.redraws;
                }
                Err(e) => {
                    log::warn!("kappa {kappa}, simulation {sim}, {method}: {e}");
                    rec.error = Some(e.to_string());
                }
            }
            rec
        })
        .collect()
}

fn run_method(
    cfg: &ExperimentConfig,
    ctx: &FitContext,
    v: &DVector<f64>,
    method: &Method,
    alpha: Option<&std::result::Result<f64, String>>,
    seed: u64,
) -> Result<MethodOutcome> {
    let boot = |scheme: Scheme| -> Result<MethodOutcome> {
        let mut plan = ResamplingPlan::new(scheme).with_b(cfg.b).with_level(cfg.level);
        plan.replicate_style = cfg.replicate_style;
        plan.bandwidth = cfg.bandwidth;
        plan.per_observation_noise = cfg.per_observation_noise;
        let out = resample::bootstrap_in(ctx, &plan, seed)?;
        Ok(MethodOutcome {
            ci: (out.ci_lo, out.ci_hi),
            variance: out.boot_variance,
            gamma_hat: None,
            failed: out.failed_replicates,
            redraws: out.redraws,
        })
    };
    match method {
        Method::Bootstrap(scheme) => boot(scheme.clone()),
        Method::CalibratedWeights => {
            let alpha = match alpha {
                Some(Ok(a)) => *a,
                Some(Err(msg)) => return Err(Error::Config(format!("weight calibration failed: {msg}"))),
                None => theory::calibrate_alpha(ctx.ds.kappa())?,
            };
            boot(Scheme::WeightedIid { weights: WeightLaw::mixture(alpha)? })
        }
        Method::Jackknife(correction) => {
            let gamma = match correction {
                JackknifeCorrection::Gamma => Some(theory::gamma_hat_from_fit(ctx.ds, &ctx.full)?),
                _ => None,
            };
            let j = resample::jackknife_in(ctx, v, gamma, cfg.level)?;
            let (variance, ci) = match correction {
                JackknifeCorrection::None => (j.var_jack, j.ci),
                JackknifeCorrection::Ls => (j.corrected_ls, j.ci_ls),
                JackknifeCorrection::Gamma => (
                    j.corrected_gamma.expect("gamma supplied"),
                    j.ci_gamma.expect("gamma supplied"),
                ),
            };
            Ok(MethodOutcome { ci, variance, gamma_hat: gamma, failed: 0, redraws: 0 })
        }
        Method::Asymptotic => {
            let pe = ctx.predicted_errors()?;
            let r_hat = (pe.variance() - pe.sigma_hat_ls.powi(2)).max(0.0).sqrt();
            let ci = theory::asymptotic_ci_from_fit(ctx.ds, &ctx.full, v, r_hat, cfg.level)?;
            let z = stats::two_sided_z(cfg.level);
            let variance = ((ci.1 - ci.0) / (2.0 * z)).powi(2);
            Ok(MethodOutcome { ci, variance, gamma_hat: None, failed: 0, redraws: 0 })
        }
        Method::NormalTheory => {
            let variance = resample::normal_theory_variance(ctx.ds, v)?;
            let ci = normal_ci(v.dot(&ctx.full.beta_hat), variance, cfg.level);
            Ok(MethodOutcome { ci, variance, gamma_hat: None, failed: 0, redraws: 0 })
        }
    }
}

/// Rescales `w` in place to the sample variance of `target`.
fn match_sample_variance(w: &mut [f64], target: &[f64]) {
    let (sw, st) = (stats::sample_variance(w), stats::sample_variance(target));
    if sw > 0.0 {
        let c = (st / sw).sqrt();
        w.iter_mut().for_each(|x| *x *= c);
    }
}

/// One relative-risk simulation. The pilot stage fits under the true law;
/// the main stage fits the same design under `G`, `G_conv` and `G_norm` with
/// common random numbers. Both comparison arms are scaled to the sample
/// variance of the generated `G` errors.
fn risk_sim(
    cfg: &ExperimentConfig,
    stage: Stage,
    kappa: f64,
    p: usize,
    sim: usize,
    r_sq: Option<f64>,
) -> Vec<SimRecord> {
    let seed = sim_seed(cfg.master_seed, stage, kappa, sim);
    let x = gen_design(cfg.design, cfg.n, p, seed);
    let eps: Vec<f64> = gen_errors(&cfg.error_law, cfg.n, seed).iter().copied().collect();
    let normals = |tag: &str| -> Vec<f64> {
        let mut r = rng::stream(seed, rng::tag(tag), 0);
        (0..cfg.n).map(|_| StandardNormal.sample(&mut r)).collect()
    };
    let mut arms: Vec<(&str, std::result::Result<Vec<f64>, String>)> = Vec::new();
    match stage {
        Stage::Pilot => arms.push(("pilot", Ok(eps))),
        Stage::Main => {
            let conv = match r_sq {
                Some(r2) => {
                    let r = r2.sqrt();
                    let mut w: Vec<f64> = eps.iter().zip(normals("conv")).map(|(e, z)| e + r * z).collect();
                    match_sample_variance(&mut w, &eps);
                    Ok(w)
                }
                None => Err("no pilot risk estimate for this kappa".to_string()),
            };
            let mut norm = normals("norm");
            match_sample_variance(&mut norm, &eps);
            arms.push(("G", Ok(eps)));
            arms.push(("G_conv", conv));
            arms.push(("G_norm", Ok(norm)));
        }
    }
    arms.into_iter()
        .map(|(name, errors)| {
            let mut rec = SimRecord::empty(stage, kappa, p, sim, name.to_string());
            let fitted = errors.map_err(Error::InvalidInput).and_then(|y| {
                let ds = Dataset::new(x.clone(), DVector::from_vec(y))?;
                mestim::fit(&ds, cfg.loss)?.ensure_converged()
            });
            match fitted {
                Ok(fit) => {
                    rec.point = Some(fit.beta_hat[0]);
                    rec.beta_sq_norm = Some(fit.beta_hat.norm_squared());
                }
                Err(e) => {
                    log::warn!("kappa {kappa}, simulation {sim}, {name}: {e}");
                    rec.error = Some(e.to_string());
                }
            }
            rec
        })
        .collect()
}

type SimKey = (Stage, u64, usize);

/// Line-delimited record log with resume support.
struct Sink {
    writer: Option<BufWriter<File>>,
    done: HashMap<SimKey, Vec<SimRecord>>,
}

impl Sink {
    fn open(cfg: &ExperimentConfig) -> Result<Self> {
        let Some(dir) = &cfg.output_dir else {
            return Ok(Sink { writer: None, done: HashMap::new() });
        };
        fs::create_dir_all(dir)?;
        let sims = dir.join(SIMS_FILE);
        let config_path = dir.join(CONFIG_FILE);
        let mut done = HashMap::new();
        let mut keep = 0;
        if sims.exists() && fs::metadata(&sims)?.len() > 0 {
            check_same_experiment(cfg, &config_path)?;
            (done, keep) = read_complete_prefix(&sims, cfg)?;
            log::info!("resuming: {} complete simulations found in {}", done.len(), sims.display());
        }
        fs::write(&config_path, cfg.to_toml()?)?;
        let file = OpenOptions::new().create(true).write(true).truncate(false).open(&sims)?;
        file.set_len(keep)?;
        let mut writer = BufWriter::new(file);
        std::io::Seek::seek(&mut writer, std::io::SeekFrom::End(0))?;
        Ok(Sink { writer: Some(writer), done })
    }

    fn take_done(&mut self, stage: Stage, kappa: f64, sim: usize, methods: &[String]) -> Option<Vec<SimRecord>> {
        let recs = self.done.remove(&(stage, kappa.to_bits(), sim))?;
        let names: Vec<&str> = recs.iter().map(|r| r.method.as_str()).collect();
        (names == methods.iter().map(String::as_str).collect::<Vec<_>>()).then_some(recs)
    }

    fn append(&mut self, recs: &[SimRecord]) -> Result<()> {
        if let Some(w) = &mut self.writer {
            for r in recs {
                serde_json::to_writer(&mut *w, r)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let Some(mut w) = self.writer {
            w.flush()?;
        }
        Ok(())
    }
}

fn check_same_experiment(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Err(Error::Config(format!(
            "{} exists without {CONFIG_FILE}; refusing to resume",
            path.with_file_name(SIMS_FILE).display()
        )));
    };
    let old = ExperimentConfig::from_toml(&text)?;
    let strip = |c: &ExperimentConfig| ExperimentConfig { output_dir: None, plots: true, save_data: false, ..c.clone() };
    if strip(&old) != strip(cfg) {
        return Err(Error::Config(format!(
            "{} holds results of a different experiment",
            path.parent().map(Path::to_path_buf).unwrap_or_default().display()
        )));
    }
    Ok(())
}

/// Reads the longest prefix of `sims.jsonl` made of complete simulations and
/// returns them with the byte length of that prefix.
fn read_complete_prefix(path: &Path, cfg: &ExperimentConfig) -> Result<(HashMap<SimKey, Vec<SimRecord>>, u64)> {
    let expected = |stage: Stage| -> usize {
        match (cfg.experiment, stage) {
            (Experiment::RelativeRisk, Stage::Pilot) => 1,
            (Experiment::RelativeRisk, Stage::Main) => RISK_ARMS.len(),
            _ => cfg.schemes.len(),
        }
    };
    let mut done = HashMap::new();
    let mut keep = 0u64;
    let mut offset = 0u64;
    let mut group: Vec<SimRecord> = Vec::new();
    let mut reader = BufReader::new(File::open(path)?);
    let mut line = String::new();
    loop {
        line.clear();
        let read = reader.read_line(&mut line)?;
        let parsed = if read > 0 && line.ends_with('\n') {
            serde_json::from_str::<SimRecord>(line.trim_end()).ok()
        } else {
            None
        };
        let Some(rec) = parsed else { break };
        offset += read as u64;
        if let Some(first) = group.first() {
            if (first.stage, first.kappa.to_bits(), first.sim) != (rec.stage, rec.kappa.to_bits(), rec.sim) {
                group.clear();
            }
        }
        group.push(rec);
        let first = &group[0];
        if group.len() == expected(first.stage) {
            let key = (first.stage, first.kappa.to_bits(), first.sim);
            done.insert(key, std::mem::take(&mut group));
            keep = offset;
        } else if group.len() > expected(first.stage) {
            break;
        }
    }
    Ok((done, keep))
}
