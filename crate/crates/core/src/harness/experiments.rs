//! The six simulation studies.

use rayon::prelude::*;
use serde::Serialize;

use super::config::{ExperimentConfig, ExperimentId, HarnessMethod};
use super::metrics::{summarize, CellKey, MethodOutcome, MetricsRow, MetricsTable};
use super::scenario::{clipped_gaussian_mean, DrawnStatistic, Scenario};
use crate::error::Result;
use crate::estimate::{
    classical_report, noise_aware_report_from, parametric_bootstrap, plugin_report, BootstrapConfig, EstimateReport,
    Method,
};
use crate::expfam::{ExpFamModel, ModelId};
use crate::privacy::{calibrate_agm, l2_sensitivity, release_calibrated, PrivacyBudget, ReleasedStatistic};
use crate::rng::SeededRng;
use crate::synthgen::{naive_from_mean, noise_aware_synth_from_mean, synthetic_statistic};

const DATA: u64 = 0;
const NOISE: u64 = 1;
const BOOTSTRAP: u64 = 2;
const SYNTHETIC: u64 = 3;

type RepOutcomes = Vec<Option<MethodOutcome>>;

/// Runs every replication of a cell in parallel. Replication `r` of cell `c`
/// draws from `root.substream([experiment, c, r])`, so the result is the same
/// for any thread count.
fn run_cell<F>(cfg: &ExperimentConfig, cell: usize, f: F) -> Result<Vec<RepOutcomes>>
where
    F: Fn(&SeededRng) -> Result<RepOutcomes> + Sync,
{
    let root = SeededRng::new(cfg.master_seed);
    let code = cfg.experiment_id.code();
    (0..cfg.replications)
        .into_par_iter()
        .map(|r| f(&root.substream(&[code, cell as u64, r as u64])))
        .collect()
}

/// Outcomes of slot `k` across replications.
fn column(reps: &[RepOutcomes], k: usize) -> Vec<Option<MethodOutcome>> {
    reps.iter().map(|o| o[k].clone()).collect()
}

fn budget_and_sigma(cfg: &ExperimentConfig, b: f64, n: usize, epsilon: f64) -> Result<(PrivacyBudget, f64)> {
    let budget = PrivacyBudget::new(epsilon, cfg.delta_rule.delta(n))?;
    Ok((budget, calibrate_agm(l2_sensitivity(b, n), &budget)))
}

/// Clean statistic of `n_syn` synthetic records drawn at `theta`, with the
/// model bound to the synthetic design. Gaussian records are streamed.
fn synthetic_mean(
    model: &ExpFamModel<f64>,
    theta: &[f64],
    n_syn: usize,
    rng: &mut SeededRng,
) -> Result<(ExpFamModel<f64>, Vec<f64>)> {
    if model.id() == ModelId::GaussianMean {
        let s2 = model.sigma0_sq();
        let m = clipped_gaussian_mean(s2 * theta[0], s2.sqrt(), model.clip().b, n_syn, rng);
        return Ok((model.clone(), vec![m]));
    }
    let data = model.sample(theta, n_syn, rng)?;
    synthetic_statistic(model, &data)
}

fn outcome(r: Result<EstimateReport<f64>>) -> Option<MethodOutcome> {
    r.ok().map(MethodOutcome::from)
}

/// Scores `methods` on one drawn dataset and its release. The plug-in
/// estimate is solved once and shared.
fn evaluate(
    cfg: &ExperimentConfig,
    methods: &[HarnessMethod],
    drawn: &DrawnStatistic,
    rel: &ReleasedStatistic<f64>,
    rep: &SeededRng,
) -> RepOutcomes {
    let (model, alpha, n) = (&drawn.model, cfg.alpha, rel.n);
    let plug = plugin_report(model, rel, alpha).ok();
    let mut synth: Option<Option<(ExpFamModel<f64>, Vec<f64>)>> = None;
    methods
        .iter()
        .map(|m| match m {
            HarnessMethod::Nonprivate => outcome(classical_report(model, &drawn.s_bar, n, alpha, Method::NonprivateMle)),
            HarnessMethod::PluginWald | HarnessMethod::Direct => plug.clone().map(MethodOutcome::from),
            HarnessMethod::NoiseAwareWald => plug
                .as_ref()
                .and_then(|p| noise_aware_report_from(model, rel, &p.theta_hat, alpha).ok())
                .map(MethodOutcome::from),
            HarnessMethod::Bootstrap => {
                let bc = BootstrapConfig { b_boot: cfg.b_boot, alpha };
                outcome(parametric_bootstrap(model, rel, &bc, &rep.child(BOOTSTRAP)))
            }
            HarnessMethod::NaiveSynth | HarnessMethod::NoiseAwareSynth => {
                let stat = synth.get_or_insert_with(|| {
                    let p = plug.as_ref()?;
                    synthetic_mean(model, &p.theta_hat, n, &mut rep.child(SYNTHETIC)).ok()
                });
                let (syn_model, s_syn) = stat.as_ref()?;
                if *m == HarnessMethod::NaiveSynth {
                    outcome(naive_from_mean(syn_model, s_syn, n, alpha))
                } else {
                    outcome(noise_aware_synth_from_mean(model, syn_model, s_syn, n, rel, alpha))
                }
            }
        })
        .collect()
}

fn draw_and_release(
    scenario: &Scenario,
    budget: PrivacyBudget,
    sigma: f64,
    rep: &SeededRng,
) -> Result<(DrawnStatistic, ReleasedStatistic<f64>)> {
    let drawn = scenario.draw(&mut rep.child(DATA))?;
    let rel = release_calibrated(&drawn.s_bar, &drawn.model, scenario.n, budget, sigma, &mut rep.child(NOISE))?;
    Ok((drawn, rel))
}

fn key<'a>(cfg: &'a ExperimentConfig, n: usize, epsilon: f64, sigma: f64) -> CellKey<'a> {
    CellKey {
        experiment: cfg.experiment_id.as_str(),
        model: cfg.model_id.as_str(),
        n,
        epsilon,
        delta: cfg.delta_rule.delta(n),
        sigma,
        b: None,
        delta_effect: None,
        ratio: None,
    }
}

/// Gaussian-mean variance of the plug-in estimate:
/// `I⁻¹/n + σ²I⁻²` with `I = σ₀²`.
fn gaussian_theory_variance(sigma0_sq: f64, n: usize, sigma: f64) -> f64 {
    1.0 / (n as f64 * sigma0_sq) + sigma * sigma / (sigma0_sq * sigma0_sq)
}

/// Empirical vs. predicted variance of the plug-in estimate over an `(n, ε)`
/// grid, optionally with zero-noise cells (`ε = ∞`).
pub fn run_variance_validation(cfg: &ExperimentConfig) -> Result<MetricsTable> {
    cfg.validate()?;
    let spec = cfg.spec_with_bound(None)?;
    let theta0 = cfg.theta0();
    let mut eps_grid = cfg.epsilon_grid.clone();
    if cfg.include_zero_noise {
        eps_grid.push(f64::INFINITY);
    }
    let mut table = MetricsTable::default();
    let mut cell = 0;
    for &n in &cfg.n_grid {
        let scenario = Scenario::new(spec.clone(), theta0.clone(), n)?;
        for &eps in &eps_grid {
            let (budget, sigma) = budget_and_sigma(cfg, spec.clip.b, n, eps)?;
            let reps = run_cell(cfg, cell, |rep| {
                let (drawn, rel) = draw_and_release(&scenario, budget, sigma, rep)?;
                Ok(vec![outcome(plugin_report(&drawn.model, &rel, cfg.alpha))])
            })?;
            cell += 1;
            let s = summarize(&column(&reps, 0), &theta0, None, cfg.alpha);
            let mut row = MetricsRow::new(&key(cfg, n, eps, sigma), HarnessMethod::PluginWald.as_str(), &s);
            row.theory_variance = Some(gaussian_theory_variance(spec.sigma0_sq, n, sigma));
            table.push(row);
        }
    }
    Ok(table)
}

/// Coverage and interval length of every configured method over `(n, ε)`.
pub fn run_coverage_sweep(cfg: &ExperimentConfig) -> Result<MetricsTable> {
    cfg.validate()?;
    let spec = cfg.spec_with_bound(None)?;
    grid_study(cfg, &[spec.clip.b], |_| Ok(spec.clone()), &[0.0])
}

/// Bias and coverage as the clipping radius varies.
pub fn run_clipping_study(cfg: &ExperimentConfig) -> Result<MetricsTable> {
    cfg.validate()?;
    let bounds = cfg.b_grid.clone().unwrap_or_default();
    grid_study(cfg, &bounds, |b| cfg.spec_with_bound(Some(b)), &[0.0])
}

/// Rejection rates of `θ = θ₀` when the data come from `θ₀ + Δ`.
pub fn run_power_study(cfg: &ExperimentConfig) -> Result<MetricsTable> {
    cfg.validate()?;
    let spec = cfg.spec_with_bound(None)?;
    grid_study(cfg, &[spec.clip.b], |_| Ok(spec.clone()), &cfg.effects())
}

/// Shared loop over `B × n × ε × Δ` cells, in that nesting order.
fn grid_study<S>(cfg: &ExperimentConfig, bounds: &[f64], spec_for: S, effects: &[f64]) -> Result<MetricsTable>
where
    S: Fn(f64) -> Result<crate::expfam::ModelSpec<f64>>,
{
    let methods = cfg.methods();
    let theta0 = cfg.theta0();
    let clipping = cfg.experiment_id == ExperimentId::ClippingStudy;
    let power = cfg.experiment_id == ExperimentId::PowerStudy;
    let mut table = MetricsTable::default();
    let mut cell = 0;
    for &b in bounds {
        let spec = spec_for(b)?;
        for &n in &cfg.n_grid {
            for &eps in &cfg.epsilon_grid {
                let (budget, sigma) = budget_and_sigma(cfg, spec.clip.b, n, eps)?;
                for &effect in effects {
                    let theta: Vec<f64> = theta0.iter().map(|t| t + effect).collect();
                    let scenario = Scenario::new(spec.clone(), theta.clone(), n)?;
                    let reps = run_cell(cfg, cell, |rep| {
                        let (drawn, rel) = draw_and_release(&scenario, budget, sigma, rep)?;
                        Ok(evaluate(cfg, &methods, &drawn, &rel, rep))
                    })?;
                    cell += 1;
                    let mut k = key(cfg, n, eps, sigma);
                    if clipping {
                        k.b = Some(b);
                    }
                    if power {
                        k.delta_effect = Some(effect);
                    }
                    let null = power.then_some(theta0.as_slice());
                    for (i, m) in methods.iter().enumerate() {
                        let s = summarize(&column(&reps, i), &theta, null, cfg.alpha);
                        table.push(MetricsRow::new(&k, m.as_str(), &s));
                    }
                }
            }
        }
    }
    Ok(table)
}

/// MSE of each method against `n` for every `ε`, with the theoretical
/// curves. All `ε` values of one `n` share the dataset and the standard
/// normal noise draws of each replication.
pub fn run_scaling_study(cfg: &ExperimentConfig) -> Result<MetricsTable> {
    cfg.validate()?;
    let spec = cfg.spec_with_bound(None)?;
    let theta0 = cfg.theta0();
    let methods = cfg.methods();
    let m = methods.len();
    let mut table = MetricsTable::default();
    for (cell, &n) in cfg.n_grid.iter().enumerate() {
        let scenario = Scenario::new(spec.clone(), theta0.clone(), n)?;
        let calib: Vec<(PrivacyBudget, f64)> = cfg
            .epsilon_grid
            .iter()
            .map(|&e| budget_and_sigma(cfg, spec.clip.b, n, e))
            .collect::<Result<_>>()?;
        let reps = run_cell(cfg, cell, |rep| {
            let drawn = scenario.draw(&mut rep.child(DATA))?;
            let mut out = Vec::with_capacity(m * calib.len());
            for (k, &(budget, sigma)) in calib.iter().enumerate() {
                let mut noise = rep.child(NOISE).child(k as u64);
                let rel = release_calibrated(&drawn.s_bar, &drawn.model, n, budget, sigma, &mut noise)?;
                out.extend(evaluate(cfg, &methods, &drawn, &rel, rep));
            }
            Ok(out)
        })?;
        for (k, (&eps, &(_, sigma))) in cfg.epsilon_grid.iter().zip(&calib).enumerate() {
            for (i, meth) in methods.iter().enumerate() {
                let s = summarize(&column(&reps, k * m + i), &theta0, None, cfg.alpha);
                let mut row = MetricsRow::new(&key(cfg, n, eps, sigma), meth.as_str(), &s);
                row.theory_variance = Some(match meth {
                    HarnessMethod::Nonprivate => gaussian_theory_variance(spec.sigma0_sq, n, 0.0),
                    _ => gaussian_theory_variance(spec.sigma0_sq, n, sigma),
                });
                table.push(row);
            }
        }
    }
    Ok(table)
}

/// Direct, naive-synthetic and noise-aware-synthetic inference as the
/// synthetic sample grows. Each replication releases once; every ratio
/// resamples from the same plug-in estimate.
pub fn run_synth_eval(cfg: &ExperimentConfig) -> Result<MetricsTable> {
    cfg.validate()?;
    let spec = cfg.spec_with_bound(None)?;
    let theta0 = cfg.theta0();
    let ratios = cfg.ratios();
    let methods = cfg.methods();
    let want = |m: HarnessMethod| methods.contains(&m);
    let mut table = MetricsTable::default();
    let mut cell = 0;
    for &n in &cfg.n_grid {
        let scenario = Scenario::new(spec.clone(), theta0.clone(), n)?;
        for &eps in &cfg.epsilon_grid {
            let (budget, sigma) = budget_and_sigma(cfg, spec.clip.b, n, eps)?;
            let sizes: Vec<usize> = ratios.iter().map(|r| ((r * n as f64).round() as usize).max(1)).collect();
            let reps = run_cell(cfg, cell, |rep| {
                let (drawn, rel) = draw_and_release(&scenario, budget, sigma, rep)?;
                let model = &drawn.model;
                let plug = plugin_report(model, &rel, cfg.alpha).ok();
                let mut out = vec![plug.clone().map(MethodOutcome::from)];
                for (k, &n_syn) in sizes.iter().enumerate() {
                    let stat = plug.as_ref().and_then(|p| {
                        let mut rng = rep.child(SYNTHETIC).child(k as u64);
                        synthetic_mean(model, &p.theta_hat, n_syn, &mut rng).ok()
                    });
                    match &stat {
                        Some((syn_model, s_syn)) => {
                            out.push(outcome(naive_from_mean(syn_model, s_syn, n_syn, cfg.alpha)));
                            out.push(outcome(noise_aware_synth_from_mean(model, syn_model, s_syn, n_syn, &rel, cfg.alpha)));
                        }
                        None => out.extend([None, None]),
                    }
                }
                Ok(out)
            })?;
            cell += 1;
            for (k, &ratio) in ratios.iter().enumerate() {
                let mut key = key(cfg, n, eps, sigma);
                key.ratio = Some(ratio);
                let slots = [
                    (HarnessMethod::Direct, 0),
                    (HarnessMethod::NaiveSynth, 1 + 2 * k),
                    (HarnessMethod::NoiseAwareSynth, 2 + 2 * k),
                ];
                for (meth, slot) in slots {
                    if want(meth) {
                        let s = summarize(&column(&reps, slot), &theta0, None, cfg.alpha);
                        table.push(MetricsRow::new(&key, meth.as_str(), &s));
                    }
                }
            }
        }
    }
    Ok(table)
}

/// Crossover sample size for one privacy level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Crossover {
    pub epsilon: f64,
    /// First grid `n` whose excess MSE over the non-private estimate is at
    /// most the non-private MSE; `None` if the grid never gets there.
    pub n_star: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingSummary {
    pub crossovers: Vec<Crossover>,
    /// Common slope of `log(MSE_dp − MSE_np)` against `log n` over the
    /// privacy-dominated cells, with a separate intercept per `ε`.
    pub slope: Option<f64>,
    pub slope_points: usize,
}

/// `(n, MSE_dp − MSE_np, MSE_np)` for one `ε`, sorted by `n`.
fn excess_curve(table: &MetricsTable, epsilon: f64) -> Vec<(usize, f64, f64)> {
    let mut pts: Vec<(usize, f64, f64)> = table
        .select(HarnessMethod::PluginWald.as_str(), None, Some(epsilon))
        .filter_map(|dp| {
            let np = table.get(HarnessMethod::Nonprivate.as_str(), dp.n, epsilon)?;
            Some((dp.n, dp.mse - np.mse, np.mse))
        })
        .collect();
    pts.sort_by_key(|p| p.0);
    pts
}

/// Reads crossover points and the privacy-term slope off a scaling table
/// that contains both `plugin_wald` and `nonprivate` rows.
pub fn scaling_summary(table: &MetricsTable, epsilon_grid: &[f64]) -> ScalingSummary {
    let mut crossovers = Vec::new();
    let (mut sxy, mut sxx, mut points) = (0.0, 0.0, 0);
    for &eps in epsilon_grid {
        let curve = excess_curve(table, eps);
        let n_star = curve.iter().find(|(_, ex, np)| ex <= np).map(|p| p.0);
        crossovers.push(Crossover { epsilon: eps, n_star });
        let seg: Vec<(f64, f64)> = curve
            .iter()
            .filter(|(_, ex, np)| ex > np)
            .map(|&(n, ex, _)| ((n as f64).ln(), ex.ln()))
            .collect();
        if seg.len() < 2 {
            continue;
        }
        let mx = seg.iter().map(|p| p.0).sum::<f64>() / seg.len() as f64;
        let my = seg.iter().map(|p| p.1).sum::<f64>() / seg.len() as f64;
        for (x, y) in &seg {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx) * (x - mx);
        }
        points += seg.len();
    }
    ScalingSummary {
        crossovers,
        slope: (sxx > 0.0).then(|| sxy / sxx),
        slope_points: points,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(id: ExperimentId) -> ExperimentConfig {
        ExperimentConfig::new(id, ModelId::GaussianMean, vec![200], vec![1.0], 40, 5)
    }

    #[test]
    fn variance_rows_carry_theory() {
        let mut cfg = small(ExperimentId::VarianceValidation);
        cfg.include_zero_noise = true;
        let t = run_variance_validation(&cfg).unwrap();
        assert_eq!(t.rows.len(), 2);
        let zero = &t.rows[1];
        assert_eq!(zero.sigma, 0.0);
        assert!((zero.theory_variance.unwrap() - 1.0 / 200.0).abs() < 1e-15);
        assert!(t.rows[0].theory_variance.unwrap() > zero.theory_variance.unwrap());
    }

    #[test]
    fn coverage_sweep_emits_every_method() {
        let mut cfg = small(ExperimentId::CoverageSweep);
        cfg.b_boot = 50;
        let t = run_coverage_sweep(&cfg).unwrap();
        let names: Vec<&str> = t.rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(names, ["nonprivate", "plugin_wald", "noise_aware_wald", "naive_synth", "bootstrap"]);
        assert!(t.rows.iter().all(|r| r.replications + r.failures == 40));
    }

    #[test]
    fn power_study_labels_null_and_alternatives() {
        let mut cfg = small(ExperimentId::PowerStudy);
        cfg.effect_grid = Some(vec![0.5]);
        let t = run_power_study(&cfg).unwrap();
        let null = t.rows.iter().find(|r| r.delta_effect == Some(0.0)).unwrap();
        assert!(null.type1_error.is_some() && null.power.is_none());
        let alt = t.rows.iter().find(|r| r.delta_effect == Some(0.5)).unwrap();
        assert!(alt.power.is_some() && alt.type1_error.is_none());
    }

    #[test]
    fn synth_eval_rows_per_ratio() {
        let mut cfg = small(ExperimentId::SynthEval);
        cfg.ratio_grid = Some(vec![1.0, 2.0]);
        let t = run_synth_eval(&cfg).unwrap();
        assert_eq!(t.rows.len(), 6);
        let d1 = t.select("direct", None, None).map(|r| r.coverage).collect::<Vec<_>>();
        assert_eq!(d1[0], d1[1]);
    }

    #[test]
    fn clipping_study_runs_regression() {
        let mut cfg = ExperimentConfig::new(ExperimentId::ClippingStudy, ModelId::Logistic, vec![150], vec![1.0], 10, 3);
        cfg.b_grid = Some(vec![1.0, 3.0]);
        let t = run_clipping_study(&cfg).unwrap();
        assert_eq!(t.rows.len(), 4);
        assert_eq!(t.rows[0].b, Some(1.0));
    }

    #[test]
    fn scaling_summary_on_synthetic_table() {
        // Excess MSE exactly c/n², baseline 1/n: crossover at n ≥ c.
        let mut t = MetricsTable::default();
        let s = summarize(&[], &[0.0], None, 0.05);
        for &n in &[100usize, 1000, 10_000] {
            for (meth, mse) in [("nonprivate", 1.0 / n as f64), ("plugin_wald", 1.0 / n as f64 + 5000.0 / (n * n) as f64)] {
                let cfg = small(ExperimentId::ScalingStudy);
                let mut row = MetricsRow::new(&key(&cfg, n, 1.0, 0.0), meth, &s);
                row.mse = mse;
                t.push(row);
            }
        }
        let sum = scaling_summary(&t, &[1.0]);
        assert_eq!(sum.crossovers[0].n_star, Some(10_000));
        assert_eq!(sum.slope_points, 2);
        assert!((sum.slope.unwrap() + 2.0).abs() < 1e-12);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let cfg = small(ExperimentId::CoverageSweep);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| run_coverage_sweep(&cfg)).unwrap();
        let b = four.install(|| run_coverage_sweep(&cfg)).unwrap();
        assert_eq!(a.to_csv_string().unwrap(), b.to_csv_string().unwrap());
    }
}
