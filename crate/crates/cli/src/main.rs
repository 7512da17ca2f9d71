use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hdboot::laws::ErrorLaw;
use hdboot::mestim::{self, FitContext};
use hdboot::resample::{self, ReplicateStyle};
use hdboot::simharness::{self, ExperimentConfig};
use hdboot::theory::{self, RiskOptions, TheoryRecord};
use hdboot::{Dataset, Error, Loss, ResamplingPlan, Scheme, WeightLaw};
use nalgebra::DVector;
use serde::Serialize;

/// M-estimation, bootstrap and jackknife inference for linear regression
/// with many predictors.
///
/// Data files are headerless CSV: each row holds the predictors followed by
/// the response in the last column.
#[derive(Debug, Parser)]
#[command(name = "hdboot", version)]
struct Cli {
    /// Seed for resampling and Monte-Carlo draws; overrides `master_seed`
    /// for `simulate`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Number of worker threads (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    output: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit an M-estimator and print the coefficients with diagnostics.
    Fit(FitArgs),
    /// Bootstrap a confidence interval for a contrast of the coefficients.
    Boot(BootArgs),
    /// Jackknife variance of a contrast, optionally dimension corrected.
    Jack(JackArgs),
    /// Solve the asymptotic risk system for a loss and error law.
    TheoryRisk(TheoryRiskArgs),
    /// Predicted weighted-bootstrap variance for least squares.
    TheoryBootvar(TheoryBootvarArgs),
    /// Poisson mixture weight that makes the weighted bootstrap variance unbiased.
    CalibrateWeights(CalibrateArgs),
    /// Run a simulation sweep described by a TOML config.
    Simulate(SimulateArgs),
    /// Render a report.csv into SVG line charts.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct LossArgs {
    /// l2, huber, l1 or l1_smoothed, optionally with a parameter as in huber(1.0).
    #[arg(long, default_value = "huber")]
    loss: String,
    /// Huber transition point.
    #[arg(long)]
    k: Option<f64>,
    /// Width of the quadratic zone of l1_smoothed.
    #[arg(long)]
    eta: Option<f64>,
}

impl LossArgs {
    fn resolve(&self) -> Result<Loss, CliError> {
        let loss: Loss = self.loss.parse()?;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(CliError::Usage(format!("--{name} must be positive, got {v}")))
            }
        };
        match (loss, self.k, self.eta) {
            (_, Some(_), Some(_)) => Err(CliError::Usage("--k and --eta cannot be combined".into())),
            (Loss::Huber { .. }, Some(k), None) => Ok(Loss::Huber { k: positive("k", k)? }),
            (Loss::SmoothedAbsolute { .. }, None, Some(eta)) => Ok(Loss::SmoothedAbsolute { eta: positive("eta", eta)? }),
            (_, Some(_), None) => Err(CliError::Usage(format!("--k applies to huber, not {loss}"))),
            (_, None, Some(_)) => Err(CliError::Usage(format!("--eta applies to l1_smoothed, not {loss}"))),
            (loss, None, None) => Ok(loss),
        }
    }
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Headerless CSV with the response in the last column.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    loss: LossArgs,
}

#[derive(Debug, Args)]
struct ContrastArgs {
    /// Comma-separated unit-norm contrast; defaults to the first coordinate.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    contrast: Option<Vec<f64>>,
    /// Confidence level.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
}

impl ContrastArgs {
    fn vector(&self, p: usize) -> Result<DVector<f64>, CliError> {
        let plan = ResamplingPlan::new(Scheme::ResidualRaw).with_level(self.level);
        let plan = match &self.contrast {
            Some(v) => plan.with_contrast(v.clone()),
            None => plan,
        };
        Ok(plan.contrast_vector(p)?)
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct BootArgs {
    #[command(flatten)]
    data: DataArgs,
    /// residual_raw, residual_hat, residual_mckean, predicted_std, deconv,
    /// gaussian, pairs or weighted:<const1|poisson1|mixture:alpha>.
    #[arg(long)]
    scheme: String,
    /// Number of bootstrap replicates.
    #[arg(long = "B", default_value_t = 1000)]
    b: usize,
    #[command(flatten)]
    contrast: ContrastArgs,
    /// Deconvolution bandwidth.
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Deconvolution replicates draw from one frozen sample of the estimated law.
    #[arg(long)]
    frozen: bool,
    /// Scale the deconvolution noise per row by the estimated elliptical factors.
    #[arg(long)]
    per_observation_noise: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Correction {
    None,
    Ls,
    Gamma,
}

#[derive(Debug, Args)]
struct JackArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = Correction::None)]
    correct: Correction,
    #[command(flatten)]
    contrast: ContrastArgs,
}

#[derive(Debug, Args)]
struct TheoryRiskArgs {
    #[command(flatten)]
    loss: LossArgs,
    /// normal, laplace, normal(sd) or laplace(scale).
    #[arg(long, default_value = "normal")]
    law: String,
    /// One or more ratios p/n (comma separated or repeated).
    #[arg(long, required = true, value_delimiter = ',')]
    kappa: Vec<f64>,
    /// Monte-Carlo sample size for the expectations.
    #[arg(long, default_value_t = 1_000_000)]
    mc_size: usize,
}

#[derive(Debug, Args)]
struct TheoryBootvarArgs {
    /// const1, poisson1 or mixture:<alpha>.
    #[arg(long)]
    weights: String,
    #[arg(long, required = true, value_delimiter = ',')]
    kappa: Vec<f64>,
    /// Error standard deviation.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long, required = true, value_delimiter = ',')]
    kappa: Vec<f64>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// A report.csv written by `simulate`.
    #[arg(long)]
    input: PathBuf,
    /// Directory for the SVG files; defaults to the directory of the input.
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Metrics to plot (all by default).
    #[arg(long, value_delimiter = ',')]
    metric: Vec<String>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Lib(Error::Io(e))
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Lib(e) if e.is_numeric() => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

type CliResult = Result<(), CliError>;

struct Out {
    format: Format,
}

impl Out {
    fn json<T: Serialize>(&self, value: &T) -> CliResult {
        let mut stdout = io::stdout().lock();
        serde_json::to_writer_pretty(&mut stdout, value).map_err(Error::from)?;
        writeln!(stdout)?;
        Ok(())
    }

    /// Writes `rows` as CSV with serde-derived headers.
    fn csv<T: Serialize>(&self, rows: &[T]) -> CliResult {
        let mut w = csv::Writer::from_writer(io::stdout().lock());
        for r in rows {
            w.serialize(r).map_err(|e| CliError::Usage(format!("csv output: {e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    fn emit<T: Serialize, R: Serialize>(&self, value: &T, rows: &[R]) -> CliResult {
        match self.format {
            Format::Json => self.json(value),
            Format::Csv => self.csv(rows),
        }
    }
}

fn load_data(path: &Path) -> Result<Dataset, CliError> {
    let file = File::open(path).map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    Dataset::read_csv(BufReader::new(file)).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct FitReport {
    loss: String,
    n: usize,
    p: usize,
    beta_hat: Vec<f64>,
    objective: f64,
    converged: bool,
    iterations: usize,
    gradient_norm: f64,
}

#[derive(Serialize)]
struct CoefRow {
    index: usize,
    beta_hat: f64,
}

fn cmd_fit(args: &FitArgs, out: &Out) -> CliResult {
    let ds = load_data(&args.data.data)?;
    let loss = args.data.loss.resolve()?;
    let fit = mestim::fit(&ds, loss)?;
    if !fit.converged {
        eprintln!("warning: solver stopped before convergence");
    }
    let report = FitReport {
        loss: loss.to_string(),
        n: ds.n(),
        p: ds.p(),
        beta_hat: fit.beta_hat.iter().copied().collect(),
        objective: fit.objective(),
        converged: fit.converged,
        iterations: fit.iterations,
        gradient_norm: fit.gradient_norm,
    };
    let rows: Vec<CoefRow> = report
        .beta_hat
        .iter()
        .enumerate()
        .map(|(index, &beta_hat)| CoefRow { index, beta_hat })
        .collect();
    out.emit(&report, &rows)
}

#[derive(Serialize)]
struct BootRow {
    scheme: String,
    point: f64,
    ci_lo: f64,
    ci_hi: f64,
    boot_variance: f64,
    replicates: usize,
    failed_replicates: usize,
    redraws: usize,
}

fn cmd_boot(args: &BootArgs, seed: u64, out: &Out) -> CliResult {
    let ds = load_data(&args.data.data)?;
    let loss = args.data.loss.resolve()?;
    let scheme: Scheme = args.scheme.parse()?;
    let mut plan = ResamplingPlan::new(scheme.clone()).with_b(args.b).with_level(args.contrast.level);
    if let Some(v) = &args.contrast.contrast {
        plan = plan.with_contrast(v.clone());
    }
    plan.bandwidth = args.bandwidth;
    plan.replicate_style = if args.frozen { ReplicateStyle::Frozen } else { ReplicateStyle::Fresh };
    plan.per_observation_noise = args.per_observation_noise;
    plan.contrast_vector(ds.p())?;
    let outcome = resample::bootstrap(&ds, loss, &plan, seed)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let row = BootRow {
        scheme: scheme.to_string(),
        point: outcome.point,
        ci_lo: outcome.ci_lo,
        ci_hi: outcome.ci_hi,
        boot_variance: outcome.boot_variance,
        replicates: outcome.replicates.len(),
        failed_replicates: outcome.failed_replicates,
        redraws: outcome.redraws,
    };
    out.emit(&outcome, &[row])
}

#[derive(Serialize)]
struct JackReport {
    correction: String,
    point: f64,
    var_jack: f64,
    variance: f64,
    ci_lo: f64,
    ci_hi: f64,
    gamma_hat: Option<f64>,
}

fn cmd_jack(args: &JackArgs, out: &Out) -> CliResult {
    let ds = load_data(&args.data.data)?;
    let loss = args.data.loss.resolve()?;
    let v = args.contrast.vector(ds.p())?;
    let ctx = FitContext::fit(&ds, loss)?;
    let gamma = match args.correct {
        Correction::Gamma => Some(theory::gamma_hat_from_fit(&ds, &ctx.full)?),
        _ => None,
    };
    let j = resample::jackknife_in(&ctx, &v, gamma, args.contrast.level)?;
    let (name, variance, ci) = match args.correct {
        Correction::None => ("none", j.var_jack, j.ci),
        Correction::Ls => ("ls", j.corrected_ls, j.ci_ls),
        Correction::Gamma => (
            "gamma",
            j.corrected_gamma.expect("gamma supplied"),
            j.ci_gamma.expect("gamma supplied"),
        ),
    };
    let report = JackReport {
        correction: name.into(),
        point: j.point,
        var_jack: j.var_jack,
        variance,
        ci_lo: ci.0,
        ci_hi: ci.1,
        gamma_hat: gamma,
    };
    out.emit(&report, std::slice::from_ref(&report))
}

fn check_kappas(kappas: &[f64]) -> CliResult {
    match kappas.iter().find(|k| !(**k > 0.0 && **k < 1.0)) {
        Some(k) => Err(CliError::Usage(format!("--kappa must lie in (0, 1), got {k}"))),
        None => Ok(()),
    }
}

fn cmd_theory_risk(args: &TheoryRiskArgs, seed: Option<u64>, out: &Out) -> CliResult {
    check_kappas(&args.kappa)?;
    let loss = args.loss.resolve()?;
    let law: ErrorLaw = args.law.parse()?;
    let mut opts = RiskOptions { mc_size: args.mc_size, ..RiskOptions::default() };
    if let Some(s) = seed {
        opts.seed = s;
    }
    let mut records = Vec::new();
    for &kappa in &args.kappa {
        let sol = theory::solve_risk_system(loss, &law, kappa, opts)?;
        records.push(TheoryRecord::from_risk(&sol, loss, &law));
    }
    out.emit(&records, &records)
}

#[derive(Serialize)]
struct BootvarRow {
    kappa: f64,
    weights: String,
    c: f64,
    expected_boot_var_scaled: f64,
    overestimation_factor: f64,
}

fn cmd_theory_bootvar(args: &TheoryBootvarArgs, out: &Out) -> CliResult {
    check_kappas(&args.kappa)?;
    let law: WeightLaw = args.weights.parse()?;
    let preds = args
        .kappa
        .iter()
        .map(|&k| theory::boot_var_prediction(&law, k, args.sigma))
        .collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<BootvarRow> = preds
        .iter()
        .map(|p| BootvarRow {
            kappa: p.kappa,
            weights: p.weight_law.to_string(),
            c: p.c,
            expected_boot_var_scaled: p.expected_boot_var_scaled,
            overestimation_factor: p.overestimation_factor,
        })
        .collect();
    out.emit(&preds, &rows)
}

#[derive(Serialize)]
struct AlphaRow {
    kappa: f64,
    alpha: f64,
}

fn cmd_calibrate(args: &CalibrateArgs, out: &Out) -> CliResult {
    check_kappas(&args.kappa)?;
    let rows = args
        .kappa
        .iter()
        .map(|&kappa| Ok(AlphaRow { kappa, alpha: theory::calibrate_alpha(kappa)? }))
        .collect::<Result<Vec<_>, Error>>()?;
    out.emit(&rows, &rows)
}

fn cmd_simulate(args: &SimulateArgs, seed: Option<u64>, out: &Out) -> CliResult {
    let mut cfg = ExperimentConfig::load(&args.config).map_err(|e| match e {
        Error::Io(io) => CliError::Usage(format!("cannot read {}: {io}", args.config.display())),
        other => CliError::Usage(format!("{}: {other}", args.config.display())),
    })?;
    if let Some(dir) = &args.output_dir {
        cfg.output_dir = Some(dir.clone());
    }
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    let report = simharness::run(&cfg)?;
    match out.format {
        Format::Json => out.json(&report.rows),
        Format::Csv => {
            simharness::write_report_csv(&report.rows, io::stdout().lock())?;
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct PlotRow {
    path: String,
}

fn cmd_report(args: &ReportArgs, out: &Out) -> CliResult {
    let file = File::open(&args.input)
        .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", args.input.display())))?;
    let rows = simharness::read_report_csv(BufReader::new(file))?;
    let dir = match &args.dir {
        Some(d) => d.clone(),
        None => args.input.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    std::fs::create_dir_all(&dir)?;
    let metrics: Vec<&str> = args.metric.iter().map(String::as_str).collect();
    let written = simharness::write_plots(&rows, &dir, &metrics)?;
    if written.is_empty() {
        return Err(CliError::Usage("no rows match the requested metrics".into()));
    }
    let rows: Vec<PlotRow> = written.iter().map(|p| PlotRow { path: p.display().to_string() }).collect();
    out.emit(&rows, &rows)
}

fn run(cli: Cli) -> CliResult {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let out = Out { format: cli.output };
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Fit(a) => cmd_fit(a, &out),
        Command::Boot(a) => cmd_boot(a, seed, &out),
        Command::Jack(a) => cmd_jack(a, &out),
        Command::TheoryRisk(a) => cmd_theory_risk(a, cli.seed, &out),
        Command::TheoryBootvar(a) => cmd_theory_bootvar(a, &out),
        Command::CalibrateWeights(a) => cmd_calibrate(a, &out),
        Command::Simulate(a) => cmd_simulate(a, cli.seed, &out),
        Command::Report(a) => cmd_report(a, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
