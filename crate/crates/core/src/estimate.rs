//! Inference from a released statistic: plug-in and noise-aware estimators,
//! the privacy-inflated variance, Wald intervals and tests, and the
//! parametric bootstrap.
//!
//! Nothing here takes a [`Dataset`] except [`nonprivate_mle`], the oracle
//! baseline that sees clean data by design.

use rayon::prelude::*;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{Dataset, ExpFamModel, InverseSolution, THETA_BOX};
use crate::linalg::Matrix;
use crate::optim::{minimize_in_box, project, BoxOptions};
use crate::privacy::ReleasedStatistic;
use crate::rng::SeededRng;
use crate::scalar::{to_f64_vec, Scalar};
use crate::special::{normal_quantile, normal_sf};

const NA_GRAD_TOL: f64 = 1e-8;
const NA_MAX_ITER: usize = 200;
const ANCHOR_WEIGHT: f64 = 0.1;
const VARIANCE_CAP: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PluginWald,
    NoiseAwareWald,
    Bootstrap,
    NonprivateMle,
    NaiveSynth,
    NoiseAwareSynth,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::PluginWald => "plugin_wald",
            Method::NoiseAwareWald => "noise_aware_wald",
            Method::Bootstrap => "bootstrap",
            Method::NonprivateMle => "nonprivate_mle",
            Method::NaiveSynth => "naive_synth",
            Method::NoiseAwareSynth => "noise_aware_synth",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub residual_norm: f64,
    /// Ridge added to the Fisher information before inversion.
    pub lambda: f64,
    pub at_bound: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_draws: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EstimateReport<T> {
    pub theta_hat: Vec<T>,
    pub variance: Matrix<T>,
    pub cis: Vec<(T, T)>,
    pub alpha: f64,
    pub method: Method,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub b_boot: usize,
    pub alpha: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            b_boot: 500,
            alpha: 0.05,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b_boot < 2 {
            return Err(Error::InvalidConfig("b_boot must be at least 2".into()));
        }
        check_alpha(self.alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub reject: bool,
    pub p_value: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// `λ = max(1e-6, 0.01σ²)`.
pub fn fisher_ridge(sigma: f64) -> f64 {
    (0.01 * sigma * sigma).max(1e-6)
}

/// `θ̃ = (∇A)⁻¹(S̃)`.
pub fn plugin_mle<T: Scalar>(model: &ExpFamModel<T>, rel: &ReleasedStatistic<T>) -> Result<Vec<T>> {
    Ok(plugin_solution(model, rel)?.theta)
}

fn plugin_solution<T: Scalar>(model: &ExpFamModel<T>, rel: &ReleasedStatistic<T>) -> Result<InverseSolution<T>> {
    rel.check_model(model)?;
    model.inverse_mean_map_detailed(&rel.s_tilde)
}

/// Noise-aware GLS estimator.
///
/// Minimizes `rᵀ Σ(θ)⁻¹ r + 0.1σ²‖θ − θ̃‖²` over the parameter box, where
/// `r = S̃ − ∇A(θ)`, `Σ(θ) = (I(θ) + λI)/n + σ²I` and `θ̃` is the plug-in
/// estimate, which is also the starting point.
pub fn noise_aware_mle<T: Scalar>(model: &ExpFamModel<T>, rel: &ReleasedStatistic<T>) -> Result<Vec<T>> {
    let plug = plugin_mle(model, rel)?;
    Ok(noise_aware_from(model, rel, &plug)?.0)
}

/// Noise-aware fit started from a precomputed plug-in estimate. Also returns
/// the number of iterations.
pub fn noise_aware_from<T: Scalar>(
    model: &ExpFamModel<T>,
    rel: &ReleasedStatistic<T>,
    theta_plug: &[T],
) -> Result<(Vec<T>, usize)> {
    rel.check_model(model)?;
    let objective = |theta: &[T]| noise_aware_objective(model, rel, theta_plug, theta);
    let opts = BoxOptions {
        lower: T::cst(-THETA_BOX),
        upper: T::cst(THETA_BOX),
        grad_tol: T::tol(NA_GRAD_TOL),
        max_iter: NA_MAX_ITER,
    };
    let res = minimize_in_box(objective, theta_plug, &opts)?;
    // A stalled line search at a tiny projected gradient is converged to
    // working precision.
    let floor = T::tol(1e-6) * T::one().max(res.value.abs());
    if res.converged || (res.stalled && res.proj_grad_norm <= floor) {
        Ok((res.x, res.iterations))
    } else {
        Err(Error::NaDiverged {
            best: to_f64_vec(&res.x),
            iterations: res.iterations,
            grad_norm: res.proj_grad_norm.to_f64_lossy(),
        })
    }
}

/// Value and gradient of the noise-aware objective at `theta`.
///
/// With `v = Σ⁻¹r`, the gradient is `−2 I(θ)v − (1/n)∇_θ(vᵀI(θ)v) + 0.2σ²(θ − θ̃)`;
/// the middle term comes from the dependence of `Σ` on `θ`.
pub(crate) fn noise_aware_objective<T: Scalar>(
    model: &ExpFamModel<T>,
    rel: &ReleasedStatistic<T>,
    theta_plug: &[T],
    theta: &[T],
) -> Result<(T, Vec<T>)> {
    let n = T::from_usize(rel.n).expect("n");
    let sigma2 = T::cst(rel.sigma * rel.sigma);
    let lambda = T::cst(fisher_ridge(rel.sigma));
    let anchor = T::cst(ANCHOR_WEIGHT) * sigma2;
    let two = T::cst(2.0);

    let (mu, fisher) = model.mean_and_fisher(theta, true)?;
    let fisher = fisher.expect("requested");
    let r: Vec<T> = rel.s_tilde.iter().zip(&mu).map(|(&s, &m)| s - m).collect();
    let mut sigma = fisher.scale(T::one() / n);
    sigma.add_diag(lambda / n + sigma2);
    let ch = sigma.cholesky().ok_or(Error::FisherSingular)?;
    let v = ch.solve(&r);
    let contract = model.fisher_derivative_contract(theta, &v)?;
    let iv = fisher.mul_vec(&v);
    let mut value: T = r.iter().zip(&v).map(|(&a, &b)| a * b).sum();
    let mut grad = vec![T::zero(); model.d()];
    for k in 0..model.d() {
        let dev = theta[k] - theta_plug[k];
        value += anchor * dev * dev;
        grad[k] = -two * iv[k] - contract[k] / n + two * anchor * dev;
    }
    Ok((value, grad))
}

/// `(1/n)Î⁻¹ + σ²Î⁻²` with `Î = I(θ̂) + λI`, diagonal capped at `1e6/n`.
pub fn dp_variance<T: Scalar>(model: &ExpFamModel<T>, theta_hat: &[T], rel: &ReleasedStatistic<T>) -> Result<Matrix<T>> {
    rel.check_model(model)?;
    Ok(dp_variance_parts(model, theta_hat, rel.n, rel.sigma, None)?.0)
}

/// Shared variance builder. `extra_n` adds a `(1/extra_n)Î⁻¹` term for the
/// Monte Carlo error of synthetic data. Returns the matrix and `λ`.
pub(crate) fn dp_variance_parts<T: Scalar>(
    model: &ExpFamModel<T>,
    theta_hat: &[T],
    n: usize,
    sigma: f64,
    extra_n: Option<usize>,
) -> Result<(Matrix<T>, f64)> {
    if theta_hat.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidConfig("non-finite estimate".into()));
    }
    let lambda = fisher_ridge(sigma);
    let mut info = model.fisher_info(theta_hat)?;
    info.add_diag(T::cst(lambda));
    let inv = info.cholesky().ok_or(Error::FisherSingular)?.inverse();
    let mut sampling = 1.0 / n as f64;
    if let Some(m) = extra_n {
        sampling += 1.0 / m as f64;
    }
    let mut v = inv.scale(T::cst(sampling)).add(&inv.matmul(&inv).scale(T::cst(sigma * sigma)));
    v.symmetrize();
    cap_diagonal(&mut v, T::cst(VARIANCE_CAP / n as f64));
    if v.diag().iter().any(|x| !x.is_finite()) {
        return Err(Error::FisherSingular);
    }
    Ok((v, lambda))
}

/// Rescales rows and columns whose variance exceeds `cap` so the diagonal
/// lands on the cap; a congruence by a positive diagonal keeps the matrix PSD.
fn cap_diagonal<T: Scalar>(v: &mut Matrix<T>, cap: T) {
    let d = v.rows();
    let scale: Vec<T> = v
        .diag()
        .iter()
        .map(|&x| if x > cap { (cap / x).sqrt() } else { T::one() })
        .collect();
    if scale.iter().all(|&s| s == T::one()) {
        return;
    }
    for i in 0..d {
        for j in 0..d {
            v[(i, j)] *= scale[i] * scale[j];
        }
    }
    for i in 0..d {
        if scale[i] != T::one() {
            v[(i, i)] = cap;
        }
    }
}

/// Per-coordinate `θ̂ⱼ ± z_{1−α/2}·√Vⱼⱼ`.
pub fn wald_ci<T: Scalar>(theta_hat: &[T], variance: &Matrix<T>, alpha: f64) -> Result<Vec<(T, T)>> {
    check_alpha(alpha)?;
    let z = T::cst(normal_quantile(1.0 - alpha / 2.0));
    theta_hat
        .iter()
        .zip(variance.diag())
        .enumerate()
        .map(|(j, (&t, v))| {
            if !(v >= T::zero()) {
                return Err(Error::InvalidVariance {
                    index: j,
                    value: v.to_f64_lossy(),
                });
            }
            let half = z * v.sqrt();
            Ok((t - half, t + half))
        })
        .collect()
}

/// Two-sided per-coordinate z-tests of `θⱼ = θ₀ⱼ`.
pub fn wald_test<T: Scalar>(theta_hat: &[T], variance: &Matrix<T>, theta0: &[T], alpha: f64) -> Result<Vec<WaldTest>> {
    check_alpha(alpha)?;
    if theta0.len() != theta_hat.len() {
        return Err(Error::DimensionMismatch {
            expected: theta_hat.len(),
            found: theta0.len(),
        });
    }
    let crit = normal_quantile(1.0 - alpha / 2.0);
    theta_hat
        .iter()
        .zip(theta0)
        .zip(variance.diag())
        .enumerate()
        .map(|(j, ((&t, &t0), v))| {
            let v = v.to_f64_lossy();
            if !(v >= 0.0) {
                return Err(Error::InvalidVariance { index: j, value: v });
            }
            let diff = (t - t0).to_f64_lossy().abs();
            let z = if diff == 0.0 { 0.0 } else { diff / v.sqrt() };
            Ok(WaldTest {
                reject: z > crit,
                p_value: (2.0 * normal_sf(z)).min(1.0),
            })
        })
        .collect()
}

fn wald_report<T: Scalar>(
    model: &ExpFamModel<T>,
    rel: &ReleasedStatistic<T>,
    theta: Vec<T>,
    alpha: f64,
    method: Method,
    mut diagnostics: Diagnostics,
) -> Result<EstimateReport<T>> {
    let (variance, lambda) = dp_variance_parts(model, &theta, rel.n, rel.sigma, None)?;
    diagnostics.lambda = lambda;
    let cis = wald_ci(&theta, &variance, alpha)?;
    Ok(EstimateReport {
        theta_hat: theta,
        variance,
        cis,
        alpha,
        method,
        diagnostics,
    })
}

/// Plug-in estimate with DP variance and Wald intervals.
pub fn plugin_report<T: Scalar>(model: &ExpFamModel<T>, rel: &ReleasedStatistic<T>, alpha: f64) -> Result<EstimateReport<T>> {
    check_alpha(alpha)?;
    let sol = plugin_solution(model, rel)?;
    let diag = Diagnostics {
        iterations: sol.iterations,
        residual_norm: sol.residual_norm.to_f64_lossy(),
        at_bound: sol.at_bound,
        ..Diagnostics::default()
    };
    wald_report(model, rel, sol.theta, alpha, Method::PluginWald, diag)
}

/// Noise-aware estimate with DP variance and Wald intervals.
pub fn noise_aware_report<T: Scalar>(model: &ExpFamModel<T>, rel: &ReleasedStatistic<T>, alpha: f64) -> Result<EstimateReport<T>> {
    check_alpha(alpha)?;
    let plug = plugin_mle(model, rel)?;
    noise_aware_report_from(model, rel, &plug, alpha)
}

/// As [`noise_aware_report`], reusing an already computed plug-in estimate.
pub fn noise_aware_report_from<T: Scalar>(
    model: &ExpFamModel<T>,
    rel: &ReleasedStatistic<T>,
    theta_plug: &[T],
    alpha: f64,
) -> Result<EstimateReport<T>> {
    check_alpha(alpha)?;
    let (theta, iterations) = noise_aware_from(model, rel, theta_plug)?;
    let mu = model.grad_log_partition(&theta)?;
    let residual = mu
        .iter()
        .zip(&rel.s_tilde)
        .map(|(&a, &b)| ((a - b) * (a - b)).to_f64_lossy())
        .sum::<f64>()
        .sqrt();
    let at_bound = theta.iter().any(|t| t.abs() >= T::cst(THETA_BOX));
    let diag = Diagnostics {
        iterations,
        residual_norm: residual,
        at_bound,
        ..Diagnostics::default()
    };
    wald_report(model, rel, theta, alpha, Method::NoiseAwareWald, diag)
}

/// DP parametric bootstrap around the plug-in estimate.
///
/// Draw `b` uses the substream `rng.child(b)`, so results do not depend on the
/// number of worker threads.
pub fn parametric_bootstrap<T: Scalar>(
    model: &ExpFamModel<T>,
    rel: &ReleasedStatistic<T>,
    cfg: &BootstrapConfig,
    rng: &SeededRng,
) -> Result<EstimateReport<T>> {
    cfg.validate()?;
    let center = plugin_mle(model, rel)?;
    let d = model.d();
    let (mu, fisher) = model.mean_and_fisher(&center, true)?;
    let mut cov = fisher.expect("requested").scale(T::one() / T::from_usize(rel.n).expect("n"));
    cov.add_diag(T::cst(rel.sigma * rel.sigma));
    let chol = cov.cholesky().ok_or(Error::FisherSingular)?;

    let draws: Vec<Option<Vec<T>>> = (0..cfg.b_boot)
        .into_par_iter()
        .map(|b| {
            let mut sub = rng.child(b as u64);
            let z: Vec<T> = (0..d)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut sub);
                    T::cst(v)
                })
                .collect();
            let shift = chol.lower_mul(&z);
            let s: Vec<T> = mu.iter().zip(&shift).map(|(&m, &e)| m + e).collect();
            bootstrap_solve(model, &s)
        })
        .collect();

    let kept: Vec<Vec<T>> = draws.into_iter().flatten().collect();
    let failures = cfg.b_boot - kept.len();
    if failures * 10 >= cfg.b_boot {
        return Err(Error::BootstrapUnstable {
            failures,
            draws: cfg.b_boot,
        });
    }

    let m = kept.len();
    let mean: Vec<T> = (0..d)
        .map(|j| kept.iter().map(|t| t[j]).sum::<T>() / T::from_usize(m).expect("m"))
        .collect();
    let mut variance = Matrix::zeros(d, d);
    for t in &kept {
        for i in 0..d {
            for j in 0..d {
                variance[(i, j)] += (t[i] - mean[i]) * (t[j] - mean[j]);
            }
        }
    }
    let variance = variance.scale(T::one() / T::from_usize(m - 1).expect("m"));

    let cis = (0..d)
        .map(|j| {
            let mut col: Vec<T> = kept.iter().map(|t| t[j]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).expect("finite draws"));
            (percentile(&col, cfg.alpha / 2.0), percentile(&col, 1.0 - cfg.alpha / 2.0))
        })
        .collect();

    Ok(EstimateReport {
        theta_hat: center,
        variance,
        cis,
        alpha: cfg.alpha,
        method: Method::Bootstrap,
        diagnostics: Diagnostics {
            iterations: cfg.b_boot,
            failed_draws: Some(failures),
            ..Diagnostics::default()
        },
    })
}

/// Inverts one bootstrap statistic; on solver failure retries once with the
/// mean at the projected last iterate.
fn bootstrap_solve<T: Scalar>(model: &ExpFamModel<T>, s: &[T]) -> Option<Vec<T>> {
    match model.inverse_mean_map(s) {
        Ok(t) => Some(t),
        Err(Error::SolverDiverged { last, .. }) => {
            let mut last: Vec<T> = last.into_iter().map(T::cst).collect();
            project(&mut last, T::cst(-THETA_BOX), T::cst(THETA_BOX));
            let s = model.grad_log_partition(&last).ok()?;
            model.inverse_mean_map(&s).ok()
        }
        Err(_) => None,
    }
}

/// Linear-interpolation sample quantile of sorted data.
pub(crate) fn percentile<T: Scalar>(sorted: &[T], p: f64) -> T {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let w = T::cst(h - lo as f64);
    sorted[lo] + w * (sorted[hi] - sorted[lo])
}

/// Classical MLE on clean data with `(1/n)I(θ̂)⁻¹` variance. Regression
/// models are re-bound to the dataset's own covariates; records are clipped
/// first.
pub fn nonprivate_mle<T: Scalar>(model: &ExpFamModel<T>, data: &Dataset<T>, alpha: f64) -> Result<EstimateReport<T>> {
    check_alpha(alpha)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let clipped = model.clip_dataset(data);
    let bound = if model.id().is_regression() {
        let design = clipped
            .design()
            .ok_or_else(|| Error::Schema("regression data needs covariates".into()))?;
        model.with_design(design)?
    } else {
        model.clone()
    };
    let s_bar = bound.mean_suff_stat(&clipped)?;
    classical_report(&bound, &s_bar, data.n(), alpha, Method::NonprivateMle)
}

/// Classical inference from a clean mean statistic over `n` records.
pub fn classical_report<T: Scalar>(
    model: &ExpFamModel<T>,
    s_bar: &[T],
    n: usize,
    alpha: f64,
    method: Method,
) -> Result<EstimateReport<T>> {
    check_alpha(alpha)?;
    let sol = model.inverse_mean_map_detailed(s_bar)?;
    let info = model.fisher_info(&sol.theta)?;
    let variance = info
        .cholesky()
        .ok_or(Error::FisherSingular)?
        .inverse()
        .scale(T::one() / T::from_usize(n).expect("n"));
    let cis = wald_ci(&sol.theta, &variance, alpha)?;
    Ok(EstimateReport {
        theta_hat: sol.theta,
        variance,
        cis,
        alpha,
        method,
        diagnostics: Diagnostics {
            iterations: sol.iterations,
            residual_norm: sol.residual_norm.to_f64_lossy(),
            lambda: 0.0,
            at_bound: sol.at_bound,
            failed_draws: None,
        },
    })
}
