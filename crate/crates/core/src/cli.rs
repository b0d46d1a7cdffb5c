//! Command-line front end.
//!
//! Only `release` reads raw records together with a privacy budget. The
//! other subcommands take released artifacts, public model configs and
//! synthetic data.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimate::{noise_aware_report, parametric_bootstrap, plugin_report, BootstrapConfig};
use crate::harness::{run_to_dir, with_threads, ConfigFile};
use crate::io::{
    read_dataset_csv, read_release, sidecar_path, to_json_string, write_dataset_csv, write_design_csv, write_json,
    ModelFile, SynthSidecar,
};
use crate::privacy::{calibrate_agm, release, verify_agm_condition, PrivacyBudget};
use crate::rng::SeededRng;
use crate::synthgen::{naive_analysis, noise_aware_synth_analysis, synthesize_from_release, SourceEstimator, SynthConfig};

/// Environment variable capping the experiment thread pool.
pub const THREADS_ENV: &str = "DPSS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "dpss", version, about = "Differentially private sufficient statistics and calibrated inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Noise scale of the analytic Gaussian mechanism.
    Calibrate(CalibrateArgs),
    /// Clip a raw dataset, compute its mean statistic and release it.
    Release(ReleaseArgs),
    /// Point estimate, DP variance and Wald intervals from a release.
    Estimate(EstimateArgs),
    /// Parametric bootstrap intervals from a release.
    Bootstrap(BootstrapArgs),
    /// Sample synthetic records from a release.
    Synth(SynthArgs),
    /// Analyze a synthetic dataset.
    Analyze(AnalyzeArgs),
    /// Simulation studies.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
}

/// `inf` requests the zero-noise sentinel.
fn parse_epsilon(s: &str) -> std::result::Result<f64, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "infinity" => Ok(f64::INFINITY),
        t => t.parse::<f64>().map_err(|e| e.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaArg {
    /// `1/n²`.
    Auto,
    Value(f64),
}

fn parse_delta(s: &str) -> std::result::Result<DeltaArg, String> {
    if s.trim().eq_ignore_ascii_case("auto") {
        Ok(DeltaArg::Auto)
    } else {
        s.trim().parse::<f64>().map(DeltaArg::Value).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// L2 sensitivity of the released statistic.
    #[arg(long, allow_negative_numbers = true)]
    pub sensitivity: f64,
    #[arg(long, value_parser = parse_epsilon, allow_negative_numbers = true)]
    pub epsilon: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub delta: f64,
}

#[derive(Debug, Args)]
pub struct ReleaseArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_parser = parse_epsilon, allow_negative_numbers = true)]
    pub epsilon: f64,
    /// A number, or `auto` for `1/n²`.
    #[arg(long, value_parser = parse_delta, default_value = "auto", allow_negative_numbers = true)]
    pub delta: DeltaArg,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the clipped public design (regression models).
    #[arg(long)]
    pub design_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    Plugin,
    NoiseAware,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub release: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "plugin")]
    pub method: EstimatorArg,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct BootstrapArgs {
    #[arg(long)]
    pub release: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub b_boot: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub release: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub n_syn: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Estimator whose output parameterizes the sampler.
    #[arg(long, value_enum, default_value = "plugin")]
    pub source: EstimatorArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalyzeMode {
    Naive,
    NoiseAware,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum)]
    pub mode: AnalyzeMode,
    /// Required in `noise-aware` mode; never read in `naive` mode.
    #[arg(long)]
    pub release: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
}

#[derive(Debug, Subcommand)]
pub enum ExperimentCommand {
    /// Run every experiment in a config file.
    Run(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; defaults to $DPSS_THREADS, then to all cores.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Serialize)]
struct Calibration {
    sensitivity: f64,
    epsilon: Option<f64>,
    delta: f64,
    sigma: f64,
    achieved_delta: f64,
}

fn print_json<S: Serialize>(value: &S) -> Result<()> {
    println!("{}", to_json_string(value)?);
    Ok(())
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<()> {
    let budget = PrivacyBudget::new(a.epsilon, a.delta)?;
    if !(a.sensitivity.is_finite() && a.sensitivity > 0.0) {
        return Err(Error::InvalidBudget(format!("sensitivity must be positive, got {}", a.sensitivity)));
    }
    let sigma = calibrate_agm(a.sensitivity, &budget);
    let achieved_delta = if sigma == 0.0 { 0.0 } else { verify_agm_condition(sigma, a.sensitivity, a.epsilon) };
    print_json(&Calibration {
        sensitivity: a.sensitivity,
        epsilon: a.epsilon.is_finite().then_some(a.epsilon),
        delta: a.delta,
        sigma,
        achieved_delta,
    })
}

fn cmd_release(a: &ReleaseArgs) -> Result<()> {
    if let DeltaArg::Value(d) = a.delta {
        PrivacyBudget::new(a.epsilon, d)?;
    } else {
        PrivacyBudget::new(a.epsilon, 0.5)?;
    }
    let mf = ModelFile::load(&a.model)?;
    let data = read_dataset_csv(&a.data, &mf.spec)?;
    let model = mf.model_for_data(&data)?;
    let n = data.n();
    let delta = match a.delta {
        DeltaArg::Auto => 1.0 / (n as f64 * n as f64),
        DeltaArg::Value(d) => d,
    };
    let budget = PrivacyBudget::new(a.epsilon, delta)?;
    let s_bar = model.mean_suff_stat(&model.clip_dataset(&data))?;
    let mut rel = release(&s_bar, &model, n, budget, &mut SeededRng::new(a.seed))?;
    rel.seed_tag = Some(a.seed.to_string());
    write_json(&a.out, &rel)?;
    if let Some(path) = &a.design_out {
        match model.design() {
            Some(design) => write_design_csv(path, design)?,
            None => return Err(Error::InvalidConfig(format!("{} has no design to write", model.id()))),
        }
    }
    eprintln!("n={} d={} B={} sigma={:e}", n, model.d(), rel.b, rel.sigma);
    Ok(())
}

fn cmd_estimate(a: &EstimateArgs) -> Result<()> {
    let rel = read_release(&a.release)?;
    let model = ModelFile::load(&a.model)?.model()?;
    rel.check_model(&model)?;
    let report = match a.method {
        EstimatorArg::Plugin => plugin_report(&model, &rel, a.alpha)?,
        EstimatorArg::NoiseAware => noise_aware_report(&model, &rel, a.alpha)?,
    };
    print_json(&report)
}

fn cmd_bootstrap(a: &BootstrapArgs) -> Result<()> {
    let cfg = BootstrapConfig {
        b_boot: a.b_boot,
        alpha: a.alpha,
    };
    cfg.validate()?;
    let rel = read_release(&a.release)?;
    let model = ModelFile::load(&a.model)?.model()?;
    rel.check_model(&model)?;
    print_json(&parametric_bootstrap(&model, &rel, &cfg, &SeededRng::new(a.seed))?)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let source = match a.source {
        EstimatorArg::Plugin => SourceEstimator::Plugin,
        EstimatorArg::NoiseAware => SourceEstimator::NoiseAware,
    };
    let cfg = SynthConfig::new(a.n_syn, source)?;
    let rel = read_release(&a.release)?;
    let model = ModelFile::load(&a.model)?.model()?;
    rel.check_model(&model)?;
    let data = synthesize_from_release(&model, &rel, &cfg, &mut SeededRng::new(a.seed))?;
    write_dataset_csv(&a.out, &data)?;
    let p = data.provenance().expect("synthetic data carries provenance");
    write_json(
        &sidecar_path(&a.out),
        &SynthSidecar {
            source_theta: p.source_theta.clone(),
            n_syn: p.n_syn,
            seed: p.seed,
            model_id: p.model_id,
        },
    )
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let release_path = match (a.mode, &a.release) {
        (AnalyzeMode::NoiseAware, None) => {
            return Err(Error::InvalidConfig("--mode noise-aware requires --release".into()));
        }
        (AnalyzeMode::NoiseAware, Some(p)) => Some(p),
        (AnalyzeMode::Naive, _) => None,
    };
    let mf = ModelFile::load(&a.model)?;
    let data = read_dataset_csv(&a.data, &mf.spec)?;
    let report = match release_path {
        None => naive_analysis(&mf.model_for_data(&data)?, &data, a.alpha)?,
        Some(path) => {
            let rel = read_release(path)?;
            let model = mf.model()?;
            noise_aware_synth_analysis(&model, &data, &rel, a.alpha)?
        }
    };
    print_json(&report)
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => match v.trim().parse::<usize>() {
            Ok(t) if t > 0 => Ok(Some(t)),
            _ => Err(Error::InvalidConfig(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        _ => Ok(None),
    }
}

fn cmd_experiment(a: &ExperimentArgs) -> Result<()> {
    let threads = match a.threads {
        Some(0) => return Err(Error::InvalidConfig("--threads must be positive".into())),
        Some(t) => Some(t),
        None => threads_from_env()?,
    };
    let bytes = std::fs::read(&a.config)?;
    let configs = serde_json::from_slice::<ConfigFile>(&bytes)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", a.config.display())))?
        .into_vec();
    if configs.is_empty() {
        return Err(Error::InvalidConfig("config lists no experiments".into()));
    }
    let out: &Path = &a.out;
    let results = with_threads(threads, || run_to_dir(&configs, &bytes, out))??;
    for r in &results {
        eprintln!("{}: {} rows", r.config.experiment_id.as_str(), r.table.rows.len());
    }
    Ok(())
}

/// Executes a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Release(a) => cmd_release(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Bootstrap(a) => cmd_bootstrap(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Experiment(ExperimentCommand::Run(a)) => cmd_experiment(a),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status: 0 on success, 2 for usage or validation errors,
/// 3 for data and IO errors, 1 for numerical failures.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_and_delta_parsers() {
        assert_eq!(parse_epsilon("inf").unwrap(), f64::INFINITY);
        assert_eq!(parse_epsilon("0.5").unwrap(), 0.5);
        assert!(parse_epsilon("x").is_err());
        assert_eq!(parse_delta("auto").unwrap(), DeltaArg::Auto);
        assert_eq!(parse_delta("1e-6").unwrap(), DeltaArg::Value(1e-6));
    }

    #[test]
    fn negative_epsilon_is_a_validation_error() {
        let code = main_with_args(["dpss", "calibrate", "--sensitivity", "1", "--epsilon", "-1", "--delta", "1e-6"]);
        assert_eq!(code, 2);
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(main_with_args(["dpss", "estimate", "--bogus"]), 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
