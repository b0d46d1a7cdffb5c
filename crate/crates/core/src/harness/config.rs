use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{ClipBounds, ModelId, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    VarianceValidation,
    CoverageSweep,
    ClippingStudy,
    ScalingStudy,
    PowerStudy,
    SynthEval,
}

impl ExperimentId {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentId::VarianceValidation => "variance_validation",
            ExperimentId::CoverageSweep => "coverage_sweep",
            ExperimentId::ClippingStudy => "clipping_study",
            ExperimentId::ScalingStudy => "scaling_study",
            ExperimentId::PowerStudy => "power_study",
            ExperimentId::SynthEval => "synth_eval",
        }
    }

    /// Stable index used in seed substream paths.
    pub(crate) fn code(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaRule {
    #[default]
    OneOverNSq,
}

impl DeltaRule {
    pub fn delta(self, n: usize) -> f64 {
        match self {
            DeltaRule::OneOverNSq => 1.0 / (n as f64 * n as f64),
        }
    }
}

/// Inference procedures the harness can score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HarnessMethod {
    /// Classical MLE on the clean statistic (oracle).
    Nonprivate,
    PluginWald,
    NoiseAwareWald,
    Bootstrap,
    NaiveSynth,
    NoiseAwareSynth,
    /// Plug-in Wald inference straight from the release, as a reference in
    /// the synthetic-data study.
    Direct,
}

impl HarnessMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            HarnessMethod::Nonprivate => "nonprivate",
            HarnessMethod::PluginWald => "plugin_wald",
            HarnessMethod::NoiseAwareWald => "noise_aware_wald",
            HarnessMethod::Bootstrap => "bootstrap",
            HarnessMethod::NaiveSynth => "naive_synth",
            HarnessMethod::NoiseAwareSynth => "noise_aware_synth",
            HarnessMethod::Direct => "direct",
        }
    }
}

fn default_replications() -> usize {
    1000
}

fn default_b_boot() -> usize {
    500
}

fn default_alpha() -> f64 {
    0.05
}

/// Declarative description of one simulation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: ExperimentId,
    #[serde(default = "default_model")]
    pub model_id: ModelId,
    pub n_grid: Vec<usize>,
    pub epsilon_grid: Vec<f64>,
    /// Clipping radii (clipping study only).
    #[serde(default, rename = "B_grid", alias = "b_grid", skip_serializing_if = "Option::is_none")]
    pub b_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub delta_rule: DeltaRule,
    #[serde(default = "default_replications")]
    pub replications: usize,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<f64>>,
    /// Alternatives `θ₀ + Δ` for the power study; `Δ = 0` is always added.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effect_grid: Option<Vec<f64>>,
    /// `n_syn / n` ratios for the synthetic-data study.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<HarnessMethod>>,
    #[serde(default = "default_b_boot")]
    pub b_boot: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Overrides the model's default clipping bound (`B` or `B_X`).
    #[serde(default, rename = "B", alias = "b", skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    /// Count cap for Poisson regression.
    #[serde(default, rename = "B_Y", alias = "b_y", skip_serializing_if = "Option::is_none")]
    pub b_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma0_sq: Option<f64>,
    /// Adds zero-noise cells to the variance validation.
    #[serde(default)]
    pub include_zero_noise: bool,
}

fn default_model() -> ModelId {
    ModelId::GaussianMean
}

pub const DEFAULT_GAUSSIAN_B: f64 = 5.0;
pub const DEFAULT_FEATURE_BOUND: f64 = 3.0;
/// Covariate norm bound for Poisson regression.
pub const DEFAULT_POISSON_FEATURE_BOUND: f64 = 1.0;
pub const DEFAULT_COUNT_CAP: f64 = 10.0;
pub const DEFAULT_RATIOS: [f64; 4] = [1.0, 5.0, 10.0, 50.0];

pub fn default_theta0(model: ModelId) -> Vec<f64> {
    match model {
        ModelId::GaussianMean => vec![1.0],
        ModelId::Logistic => vec![0.5, -0.5, 0.3, -0.3, 0.2],
        ModelId::Poisson => vec![0.3, 0.2],
    }
}

impl ExperimentConfig {
    /// Minimal config with every optional field at its default.
    pub fn new(experiment_id: ExperimentId, model_id: ModelId, n_grid: Vec<usize>, epsilon_grid: Vec<f64>, replications: usize, master_seed: u64) -> Self {
        Self {
            experiment_id,
            model_id,
            n_grid,
            epsilon_grid,
            b_grid: None,
            delta_rule: DeltaRule::OneOverNSq,
            replications,
            master_seed,
            theta0: None,
            effect_grid: None,
            ratio_grid: None,
            methods: None,
            b_boot: default_b_boot(),
            alpha: default_alpha(),
            b: None,
            b_y: None,
            sigma0_sq: None,
            include_zero_noise: false,
        }
    }

    pub fn theta0(&self) -> Vec<f64> {
        self.theta0.clone().unwrap_or_else(|| default_theta0(self.model_id))
    }

    /// Model structure for a given clipping bound (`None` uses the default).
    pub fn spec_with_bound(&self, bound: Option<f64>) -> Result<ModelSpec<f64>> {
        let d = self.theta0().len();
        let clip = match self.model_id {
            ModelId::GaussianMean => ClipBounds::gaussian(bound.or(self.b).unwrap_or(DEFAULT_GAUSSIAN_B)),
            ModelId::Logistic => ClipBounds::logistic(bound.or(self.b).unwrap_or(DEFAULT_FEATURE_BOUND)),
            ModelId::Poisson => ClipBounds::poisson(
                bound.or(self.b).unwrap_or(DEFAULT_POISSON_FEATURE_BOUND),
                self.b_y.unwrap_or(DEFAULT_COUNT_CAP),
            ),
        };
        let spec = ModelSpec {
            id: self.model_id,
            d,
            sigma0_sq: self.sigma0_sq.unwrap_or(1.0),
            clip,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn methods(&self) -> Vec<HarnessMethod> {
        use HarnessMethod::*;
        if let Some(m) = &self.methods {
            return m.clone();
        }
        match self.experiment_id {
            ExperimentId::VarianceValidation => vec![PluginWald],
            ExperimentId::CoverageSweep => {
                let mut m = vec![Nonprivate, PluginWald, NoiseAwareWald, NaiveSynth];
                if self.model_id == ModelId::GaussianMean {
                    m.push(Bootstrap);
                }
                m
            }
            ExperimentId::ClippingStudy => vec![PluginWald, NoiseAwareWald],
            ExperimentId::ScalingStudy => vec![Nonprivate, PluginWald],
            ExperimentId::PowerStudy => vec![Nonprivate, PluginWald, NaiveSynth],
            ExperimentId::SynthEval => vec![Direct, NaiveSynth, NoiseAwareSynth],
        }
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.ratio_grid.clone().unwrap_or_else(|| DEFAULT_RATIOS.to_vec())
    }

    /// `Δ = 0` followed by the configured effects, without duplicates.
    pub fn effects(&self) -> Vec<f64> {
        let mut out = vec![0.0];
        for &e in self.effect_grid.as_deref().unwrap_or(&[0.1, 0.2, 0.5, 1.0]) {
            if !out.contains(&e) {
                out.push(e);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("{}: {msg}", self.experiment_id.as_str())));
        if self.n_grid.is_empty() || self.epsilon_grid.is_empty() {
            return bad("grids must be nonempty");
        }
        if self.n_grid.contains(&0) {
            return bad("n must be positive");
        }
        if self.epsilon_grid.iter().any(|&e| !(e > 0.0)) {
            return bad("epsilon must be positive");
        }
        if self.replications < 2 {
            return bad("replications must be at least 2");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if self.b_boot < 2 {
            return bad("b_boot must be at least 2");
        }
        let needs_gaussian = matches!(
            self.experiment_id,
            ExperimentId::VarianceValidation | ExperimentId::ScalingStudy | ExperimentId::PowerStudy | ExperimentId::SynthEval
        );
        if needs_gaussian && self.model_id != ModelId::GaussianMean {
            return bad("requires model_id gaussian_mean");
        }
        if self.experiment_id == ExperimentId::ClippingStudy {
            if self.model_id == ModelId::GaussianMean {
                return bad("requires a regression model");
            }
            match &self.b_grid {
                Some(g) if !g.is_empty() && g.iter().all(|&b| b > 0.0) => {}
                _ => return bad("needs a nonempty B_grid of positive bounds"),
            }
        }
        if self.ratios().iter().any(|&r| !(r > 0.0)) {
            return bad("ratios must be positive");
        }
        if self.methods().is_empty() {
            return bad("no methods selected");
        }
        if let Some(t) = &self.theta0 {
            if t.is_empty() || (self.model_id == ModelId::GaussianMean && t.len() != 1) {
                return bad("theta0 has the wrong dimension");
            }
        }
        self.spec_with_bound(None).map(|_| ())
    }
}

/// A config file holds one experiment or a list of them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConfigFile {
    Many { experiments: Vec<ExperimentConfig> },
    One(ExperimentConfig),
}

impl ConfigFile {
    pub fn into_vec(self) -> Vec<ExperimentConfig> {
        match self {
            ConfigFile::Many { experiments } => experiments,
            ConfigFile::One(c) => vec![c],
        }
    }
}
