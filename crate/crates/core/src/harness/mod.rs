//! Deterministic Monte Carlo studies of the release-and-infer pipeline.
//!
//! Each study is described by an [`ExperimentConfig`] and produces a
//! [`MetricsTable`]. Replication `r` of cell `c` draws all of its randomness
//! from `SeededRng::new(master_seed).substream([experiment, c, r])`, split into
//! fixed children for data, release noise, bootstrap and synthetic draws, so
//! tables are bit-identical for any thread count.

mod config;
mod experiments;
mod metrics;
mod scenario;

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{
    default_theta0, ConfigFile, DeltaRule, ExperimentConfig, ExperimentId, HarnessMethod, DEFAULT_COUNT_CAP,
    DEFAULT_FEATURE_BOUND, DEFAULT_GAUSSIAN_B, DEFAULT_POISSON_FEATURE_BOUND, DEFAULT_RATIOS,
};
pub use experiments::{
    run_clipping_study, run_coverage_sweep, run_power_study, run_scaling_study, run_synth_eval, run_variance_validation,
    scaling_summary, Crossover, ScalingSummary,
};
pub use metrics::{summarize, MethodOutcome, MetricsRow, MetricsTable, Summary, COLUMNS};
pub use scenario::{DrawnStatistic, Scenario};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, to_json_string};

/// Output of one study.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub table: MetricsTable,
    /// Present for the scaling study.
    pub scaling: Option<ScalingSummary>,
}

/// Dispatches on `cfg.experiment_id` using the current rayon pool.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let table = match cfg.experiment_id {
        ExperimentId::VarianceValidation => run_variance_validation(cfg)?,
        ExperimentId::CoverageSweep => run_coverage_sweep(cfg)?,
        ExperimentId::ClippingStudy => run_clipping_study(cfg)?,
        ExperimentId::ScalingStudy => run_scaling_study(cfg)?,
        ExperimentId::PowerStudy => run_power_study(cfg)?,
        ExperimentId::SynthEval => run_synth_eval(cfg)?,
    };
    let scaling = (cfg.experiment_id == ExperimentId::ScalingStudy).then(|| scaling_summary(&table, &cfg.epsilon_grid));
    Ok(ExperimentResult {
        config: cfg.clone(),
        table,
        scaling,
    })
}

/// Runs `f` on a dedicated pool with `threads` workers, or on the global pool
/// when `threads` is `None`.
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        None => Ok(f()),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_sha256: String,
    version: &'static str,
    master_seeds: Vec<u64>,
    experiments: Vec<ManifestEntry<'a>>,
}

#[derive(Serialize)]
struct ManifestEntry<'a> {
    experiment_id: &'static str,
    model_id: &'static str,
    master_seed: u64,
    replications: usize,
    table: String,
    rows: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    scaling: Option<&'a ScalingSummary>,
}

fn scaling_csv(summary: &ScalingSummary) -> Result<String> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(["epsilon", "n_star", "slope", "slope_points"])?;
    let slope = summary.slope.map(fmt_f64).unwrap_or_default();
    for c in &summary.crossovers {
        w.write_record([
            fmt_f64(c.epsilon),
            c.n_star.map(|n| n.to_string()).unwrap_or_default(),
            slope.clone(),
            summary.slope_points.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("ascii output"))
}

/// `(n, epsilon, theory_variance, emp_variance)` pairs for a
/// variance-validation table.
fn variance_pairs_csv(table: &MetricsTable) -> Result<String> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(["n", "epsilon", "theory_variance", "emp_variance", "emp_variance_se"])?;
    for r in &table.rows {
        if let (Some(t), Some(e)) = (r.theory_variance, r.emp_variance) {
            w.write_record([
                r.n.to_string(),
                fmt_f64(r.epsilon),
                fmt_f64(t),
                fmt_f64(e),
                r.emp_variance_se.map(fmt_f64).unwrap_or_default(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("ascii output"))
}

/// Runs every config and writes `<id>.csv` tables, long-format copies under
/// `figures/`, and a `manifest.json` keyed by the SHA-256 of `config_bytes`.
pub fn run_to_dir(configs: &[ExperimentConfig], config_bytes: &[u8], out: &Path) -> Result<Vec<ExperimentResult>> {
    for cfg in configs {
        cfg.validate()?;
    }
    let figures = out.join("figures");
    std::fs::create_dir_all(&figures)?;
    let mut seen: HashMap<&'static str, usize> = HashMap::new();
    let mut results = Vec::with_capacity(configs.len());
    let mut names = Vec::with_capacity(configs.len());
    for cfg in configs {
        let res = run_experiment(cfg)?;
        let id = cfg.experiment_id.as_str();
        let count = seen.entry(id).or_insert(0);
        let stem = if *count == 0 { id.to_string() } else { format!("{id}_{count}") };
        *count += 1;
        res.table.write_csv(&out.join(format!("{stem}.csv")))?;
        std::fs::write(figures.join(format!("{stem}.csv")), res.table.to_long_csv_string()?)?;
        if let Some(s) = &res.scaling {
            std::fs::write(figures.join(format!("{stem}_summary.csv")), scaling_csv(s)?)?;
        }
        if cfg.experiment_id == ExperimentId::VarianceValidation {
            std::fs::write(figures.join(format!("{stem}_pairs.csv")), variance_pairs_csv(&res.table)?)?;
        }
        names.push(format!("{stem}.csv"));
        results.push(res);
    }
    let manifest = Manifest {
        config_sha256: format!("{:x}", Sha256::digest(config_bytes)),
        version: env!("CARGO_PKG_VERSION"),
        master_seeds: configs.iter().map(|c| c.master_seed).collect(),
        experiments: results
            .iter()
            .zip(names)
            .map(|(r, table)| ManifestEntry {
                experiment_id: r.config.experiment_id.as_str(),
                model_id: r.config.model_id.as_str(),
                master_seed: r.config.master_seed,
                replications: r.config.replications,
                table,
                rows: r.table.rows.len(),
                scaling: r.scaling.as_ref(),
            })
            .collect(),
    };
    std::fs::write(out.join("manifest.json"), to_json_string(&manifest)?)?;
    Ok(results)
}
