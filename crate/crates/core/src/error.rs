use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report. [`Error::code`] gives the stable
/// machine-readable tag used in CLI messages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty_dataset: no records")]
    EmptyDataset,

    #[error("mean_overflow: linear predictor {eta} exceeds 700")]
    MeanOverflow { eta: f64 },

    #[error("solver_diverged after {iterations} iterations (residual {residual:e})")]
    SolverDiverged {
        last: Vec<f64>,
        iterations: usize,
        residual: f64,
    },

    #[error("na_diverged after {iterations} iterations (projected gradient {grad_norm:e})")]
    NaDiverged {
        best: Vec<f64>,
        iterations: usize,
        grad_norm: f64,
    },

    #[error("sensitivity_violated: |s_bar| = {norm} exceeds bound {bound}")]
    SensitivityViolated { norm: f64, bound: f64 },

    #[error("fisher_singular: regularized information matrix is not positive definite")]
    FisherSingular,

    #[error("invalid_variance: diagonal entry {index} is {value}")]
    InvalidVariance { index: usize, value: f64 },

    #[error("bootstrap_unstable: {failures} of {draws} draws failed")]
    BootstrapUnstable { failures: usize, draws: usize },

    #[error("invalid_budget: {0}")]
    InvalidBudget(String),

    #[error("invalid_config: {0}")]
    InvalidConfig(String),

    #[error("dimension_mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("schema_mismatch: {0}")]
    Schema(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyDataset => "empty_dataset",
            Error::MeanOverflow { .. } => "mean_overflow",
            Error::SolverDiverged { .. } => "solver_diverged",
            Error::NaDiverged { .. } => "na_diverged",
            Error::SensitivityViolated { .. } => "sensitivity_violated",
            Error::FisherSingular => "fisher_singular",
            Error::InvalidVariance { .. } => "invalid_variance",
            Error::BootstrapUnstable { .. } => "bootstrap_unstable",
            Error::InvalidBudget(_) => "invalid_budget",
            Error::InvalidConfig(_) => "invalid_config",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Schema(_) => "schema_mismatch",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    /// Process exit status for the CLI: 2 for validation, 3 for data or IO,
    /// 1 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::InvalidBudget(_) | Error::InvalidConfig(_) => 2,
            Error::EmptyDataset
            | Error::DimensionMismatch { .. }
            | Error::Schema(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 3,
            _ => 1,
        }
    }
}
