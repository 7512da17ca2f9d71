//! Configuration-driven simulation sweeps: data generators, coverage,
//! variance-ratio, interval-width and relative-risk experiments, with
//! CSV/JSON output and SVG plots.

mod config;
mod generate;
mod report;
mod run;
mod svg;

pub use config::{
    DesignKind, Experiment, ExperimentConfig, JackknifeCorrection, LambdaLaw, Method, SCHEMA_VERSION,
};
pub use generate::{gen_design, gen_errors, gen_lambda};
pub use report::{aggregate, read_report_csv, write_report_csv, ReportRow, SimRecord, SimReport, Stage};
pub use run::{
    data_path, run, run_ci_width, run_coverage, run_relative_risk, run_variance_ratio, sim_dataset, sim_seed,
    CONFIG_FILE, REPORT_FILE, SIMS_FILE,
};
pub use svg::{line_chart, metric_series, write_plots, Series};
