use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{wald_test, EstimateReport};
use crate::io::fmt_f64;
use crate::linalg::Matrix;

/// What one method produced in one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub theta: Vec<f64>,
    pub cis: Vec<(f64, f64)>,
    pub variance_diag: Vec<f64>,
}

impl From<EstimateReport<f64>> for MethodOutcome {
    fn from(r: EstimateReport<f64>) -> Self {
        Self {
            variance_diag: r.variance.diag(),
            theta: r.theta_hat,
            cis: r.cis,
        }
    }
}

/// Monte Carlo summary of one method in one cell. Failed replications are
/// counted and left out of every average.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub replications: usize,
    pub failures: usize,
    pub coverage: f64,
    pub coverage_se: f64,
    pub avg_ci_length: f64,
    pub ci_length_se: f64,
    pub mse: f64,
    pub mse_se: f64,
    pub bias_abs: f64,
    pub bias_se: f64,
    pub emp_variance: f64,
    pub emp_variance_se: f64,
    pub rejection: Option<f64>,
    pub rejection_se: Option<f64>,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / m;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Averages outcomes against the true parameter. When `theta_null` is given,
/// also records the Wald rejection rate of `θ = θ_null`.
pub fn summarize(outcomes: &[Option<MethodOutcome>], theta_true: &[f64], theta_null: Option<&[f64]>, alpha: f64) -> Summary {
    let ok: Vec<&MethodOutcome> = outcomes.iter().flatten().collect();
    let r = ok.len();
    let failures = outcomes.len() - r;
    let d = theta_true.len();

    let covered: Vec<f64> = ok
        .iter()
        .map(|o| {
            let hits = o
                .cis
                .iter()
                .zip(theta_true)
                .filter(|((lo, hi), t)| lo <= t && *t <= hi)
                .count();
            hits as f64 / d as f64
        })
        .collect();
    let coverage = if r == 0 { f64::NAN } else { covered.iter().sum::<f64>() / r as f64 };
    let coverage_se = (coverage * (1.0 - coverage) / r as f64).sqrt();

    let lengths: Vec<f64> = ok
        .iter()
        .map(|o| o.cis.iter().map(|(lo, hi)| hi - lo).sum::<f64>() / d as f64)
        .collect();
    let (avg_ci_length, ci_length_se) = mean_se(&lengths);

    let sq: Vec<f64> = ok
        .iter()
        .map(|o| o.theta.iter().zip(theta_true).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d as f64)
        .collect();
    let (mse, mse_se) = mean_se(&sq);

    let mut bias_abs = 0.0;
    let mut bias_se = 0.0;
    let mut emp_variance = 0.0;
    for j in 0..d {
        let col: Vec<f64> = ok.iter().map(|o| o.theta[j]).collect();
        let (m, se) = mean_se(&col);
        bias_abs += (m - theta_true[j]).abs() / d as f64;
        bias_se += se / d as f64;
        let var = if r > 1 {
            col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (r - 1) as f64
        } else {
            f64::NAN
        };
        emp_variance += var / d as f64;
    }
    if r == 0 {
        bias_abs = f64::NAN;
        bias_se = f64::NAN;
        emp_variance = f64::NAN;
    }
    let emp_variance_se = emp_variance * (2.0 / (r as f64 - 1.0)).sqrt();

    let (rejection, rejection_se) = match theta_null {
        Some(null) => {
            let rej: Vec<f64> = ok
                .iter()
                .map(|o| {
                    let v = Matrix::diagonal(&o.variance_diag);
                    match wald_test(&o.theta, &v, null, alpha) {
                        Ok(tests) => tests.iter().filter(|t| t.reject).count() as f64 / d as f64,
                        Err(_) => f64::NAN,
                    }
                })
                .collect();
            let p = rej.iter().sum::<f64>() / r as f64;
            (Some(p), Some((p * (1.0 - p) / r as f64).sqrt()))
        }
        None => (None, None),
    };

    Summary {
        replications: r,
        failures,
        coverage,
        coverage_se,
        avg_ci_length,
        ci_length_se,
        mse,
        mse_se,
        bias_abs,
        bias_se,
        emp_variance,
        emp_variance_se,
        rejection,
        rejection_se,
    }
}

/// One line of a metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub experiment: String,
    pub model: String,
    pub method: String,
    pub n: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub sigma: f64,
    pub b: Option<f64>,
    pub delta_effect: Option<f64>,
    pub ratio: Option<f64>,
    pub replications: usize,
    pub failures: usize,
    pub coverage: f64,
    pub coverage_se: f64,
    pub avg_ci_length: f64,
    pub ci_length_se: f64,
    pub mse: f64,
    pub mse_se: f64,
    pub bias_abs: f64,
    pub bias_se: f64,
    pub type1_error: Option<f64>,
    pub power: Option<f64>,
    pub rejection_se: Option<f64>,
    pub emp_variance: Option<f64>,
    pub emp_variance_se: Option<f64>,
    pub theory_variance: Option<f64>,
}

pub(crate) struct CellKey<'a> {
    pub experiment: &'a str,
    pub model: &'a str,
    pub n: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub sigma: f64,
    pub b: Option<f64>,
    pub delta_effect: Option<f64>,
    pub ratio: Option<f64>,
}

impl MetricsRow {
    pub(crate) fn new(key: &CellKey<'_>, method: &str, s: &Summary) -> Self {
        let (type1_error, power) = match (s.rejection, key.delta_effect) {
            (Some(p), Some(e)) if e == 0.0 => (Some(p), None),
            (Some(p), _) => (None, Some(p)),
            (None, _) => (None, None),
        };
        Self {
            experiment: key.experiment.to_string(),
            model: key.model.to_string(),
            method: method.to_string(),
            n: key.n,
            epsilon: key.epsilon,
            delta: key.delta,
            sigma: key.sigma,
            b: key.b,
            delta_effect: key.delta_effect,
            ratio: key.ratio,
            replications: s.replications,
            failures: s.failures,
            coverage: s.coverage,
            coverage_se: s.coverage_se,
            avg_ci_length: s.avg_ci_length,
            ci_length_se: s.ci_length_se,
            mse: s.mse,
            mse_se: s.mse_se,
            bias_abs: s.bias_abs,
            bias_se: s.bias_se,
            type1_error,
            power,
            rejection_se: s.rejection_se,
            emp_variance: Some(s.emp_variance),
            emp_variance_se: Some(s.emp_variance_se),
            theory_variance: None,
        }
    }
}

pub const COLUMNS: [&str; 26] = [
    "experiment",
    "model",
    "method",
    "n",
    "epsilon",
    "delta",
    "sigma",
    "B",
    "delta_effect",
    "ratio",
    "replications",
    "failures",
    "coverage",
    "coverage_se",
    "avg_ci_length",
    "ci_length_se",
    "mse",
    "mse_se",
    "bias_abs",
    "bias_se",
    "type1_error",
    "power",
    "rejection_se",
    "emp_variance",
    "emp_variance_se",
    "theory_variance",
];

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Schema(format!("bad number {s:?}")))
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_f64(s).map(Some)
    }
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse::<usize>().map_err(|_| Error::Schema(format!("bad count {s:?}")))
}

/// Rows keyed by experiment, method and cell parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: MetricsTable) {
        self.rows.extend(other.rows);
    }

    /// Rows for `method`, optionally narrowed by `n` and `epsilon`.
    pub fn select<'a>(&'a self, method: &'a str, n: Option<usize>, epsilon: Option<f64>) -> impl Iterator<Item = &'a MetricsRow> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.method == method && n.is_none_or(|n| r.n == n) && epsilon.is_none_or(|e| r.epsilon == e))
    }

    /// The single row matching all the given keys.
    pub fn get(&self, method: &str, n: usize, epsilon: f64) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.method == method && r.n == n && r.epsilon == epsilon)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(COLUMNS)?;
        for r in &self.rows {
            w.write_record([
                r.experiment.clone(),
                r.model.clone(),
                r.method.clone(),
                r.n.to_string(),
                fmt_f64(r.epsilon),
                fmt_f64(r.delta),
                fmt_f64(r.sigma),
                opt(r.b),
                opt(r.delta_effect),
                opt(r.ratio),
                r.replications.to_string(),
                r.failures.to_string(),
                fmt_f64(r.coverage),
                fmt_f64(r.coverage_se),
                fmt_f64(r.avg_ci_length),
                fmt_f64(r.ci_length_se),
                fmt_f64(r.mse),
                fmt_f64(r.mse_se),
                fmt_f64(r.bias_abs),
                fmt_f64(r.bias_se),
                opt(r.type1_error),
                opt(r.power),
                opt(r.rejection_se),
                opt(r.emp_variance),
                opt(r.emp_variance_se),
                opt(r.theory_variance),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("ascii output"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header != COLUMNS {
            return Err(Error::Schema("metrics table header mismatch".into()));
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let f = |i: usize| rec.get(i).unwrap_or("");
            rows.push(MetricsRow {
                experiment: f(0).to_string(),
                model: f(1).to_string(),
                method: f(2).to_string(),
                n: parse_usize(f(3))?,
                epsilon: parse_f64(f(4))?,
                delta: parse_f64(f(5))?,
                sigma: parse_f64(f(6))?,
                b: parse_opt(f(7))?,
                delta_effect: parse_opt(f(8))?,
                ratio: parse_opt(f(9))?,
                replications: parse_usize(f(10))?,
                failures: parse_usize(f(11))?,
                coverage: parse_f64(f(12))?,
                coverage_se: parse_f64(f(13))?,
                avg_ci_length: parse_f64(f(14))?,
                ci_length_se: parse_f64(f(15))?,
                mse: parse_f64(f(16))?,
                mse_se: parse_f64(f(17))?,
                bias_abs: parse_f64(f(18))?,
                bias_se: parse_f64(f(19))?,
                type1_error: parse_opt(f(20))?,
                power: parse_opt(f(21))?,
                rejection_se: parse_opt(f(22))?,
                emp_variance: parse_opt(f(23))?,
                emp_variance_se: parse_opt(f(24))?,
                theory_variance: parse_opt(f(25))?,
            });
        }
        Ok(Self { rows })
    }

    /// Long-format rows (`cell keys, metric, value, se`) for plotting.
    pub fn to_long_csv_string(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record([
            "experiment", "model", "method", "n", "epsilon", "B", "delta_effect", "ratio", "metric", "value", "se",
        ])?;
        for r in &self.rows {
            let mut metrics: Vec<(&str, f64, Option<f64>)> = vec![
                ("coverage", r.coverage, Some(r.coverage_se)),
                ("avg_ci_length", r.avg_ci_length, Some(r.ci_length_se)),
                ("mse", r.mse, Some(r.mse_se)),
                ("bias_abs", r.bias_abs, Some(r.bias_se)),
            ];
            if let Some(v) = r.type1_error {
                metrics.push(("type1_error", v, r.rejection_se));
            }
            if let Some(v) = r.power {
                metrics.push(("power", v, r.rejection_se));
            }
            if let Some(v) = r.emp_variance {
                metrics.push(("emp_variance", v, r.emp_variance_se));
            }
            if let Some(v) = r.theory_variance {
                metrics.push(("theory_variance", v, None));
            }
            for (name, value, se) in metrics {
                w.write_record([
                    r.experiment.clone(),
                    r.model.clone(),
                    r.method.clone(),
                    r.n.to_string(),
                    fmt_f64(r.epsilon),
                    opt(r.b),
                    opt(r.delta_effect),
                    opt(r.ratio),
                    name.to_string(),
                    fmt_f64(value),
                    opt(se),
                ])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("ascii output"))
    }
}
