//! Exponential-family models with bounded sufficient statistics.
//!
//! Three families are supported:
//!
//! * `gaussian_mean`: `X ~ N(σ₀²θ, σ₀²)` with known `σ₀²`, `s(x) = x`,
//!   `A(θ) = σ₀²θ²/2`. Observations are truncated to `[-B, B]`.
//! * `logistic`: `P(y = 1 | x) = sigmoid(xᵀθ)`, `s(x, y) = y·x`.
//! * `poisson`: `y | x ~ Poisson(exp(xᵀθ))`, `s(x, y) = y·x`.
//!
//! Regression designs are public and fixed: the log-partition and its
//! derivatives are averages over the design rows, and only `Σ yᵢxᵢ` carries
//! private information.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::optim::{minimize_in_box, project, BoxOptions};
use crate::scalar::{norm2, to_f64_vec, Scalar};

/// Natural parameters are restricted to `[-THETA_BOX, THETA_BOX]^d`.
pub const THETA_BOX: f64 = 10.0;
const MAX_LINEAR_PREDICTOR: f64 = 700.0;
const MAX_NEWTON_ITER: usize = 100;
const MAX_HALVINGS: usize = 30;
const MAX_FALLBACK_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    GaussianMean,
    Logistic,
    Poisson,
}

impl ModelId {
    pub fn is_regression(self) -> bool {
        !matches!(self, ModelId::GaussianMean)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelId::GaussianMean => "gaussian_mean",
            ModelId::Logistic => "logistic",
            ModelId::Poisson => "poisson",
        }
    }
}

impl std::fmt::Display for ModelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_mean" | "gaussian" => Ok(ModelId::GaussianMean),
            "logistic" => Ok(ModelId::Logistic),
            "poisson" => Ok(ModelId::Poisson),
            other => Err(Error::InvalidConfig(format!("unknown model_id {other:?}"))),
        }
    }
}

/// Clipping rule. `b` is always the ℓ₂ bound on `s(x)` that sets sensitivity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipBounds<T> {
    pub b: T,
    pub b_x: Option<T>,
    pub b_y: Option<T>,
}

impl<T: Scalar> ClipBounds<T> {
    /// Truncation of scalar observations to `[-b, b]`.
    pub fn gaussian(b: T) -> Self {
        Self { b, b_x: None, b_y: None }
    }

    /// Feature-norm projection; `y ∈ {0, 1}` so `‖y·x‖ ≤ b_x`.
    pub fn logistic(b_x: T) -> Self {
        Self {
            b: b_x,
            b_x: Some(b_x),
            b_y: None,
        }
    }

    /// Feature-norm projection plus a count cap; effective bound `b_x·b_y`.
    pub fn poisson(b_x: T, b_y: T) -> Self {
        Self {
            b: b_x * b_y,
            b_x: Some(b_x),
            b_y: Some(b_y),
        }
    }

    fn validate(&self, id: ModelId) -> Result<()> {
        let positive = |v: T| v > T::zero() && v.is_finite();
        let ok = positive(self.b)
            && match id {
                ModelId::GaussianMean => true,
                ModelId::Logistic => self.b_x.is_some_and(|bx| positive(bx) && bx == self.b),
                ModelId::Poisson => match (self.b_x, self.b_y) {
                    (Some(bx), Some(by)) => positive(bx) && positive(by) && self.b == bx * by,
                    _ => false,
                },
            };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("clip bounds {self:?} invalid for {id}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record<T> {
    /// One scalar observation (Gaussian mean model).
    Scalar(T),
    /// Covariates and response (regression models).
    Labeled { x: Vec<T>, y: T },
}

/// Where a synthetic dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_theta: Vec<f64>,
    pub n_syn: usize,
    pub seed: u64,
    pub model_id: ModelId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    records: Vec<Record<T>>,
    provenance: Option<Provenance>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(records: Vec<Record<T>>) -> Self {
        Self {
            records,
            provenance: None,
        }
    }

    pub fn from_scalars(values: &[T]) -> Self {
        Self::new(values.iter().map(|&v| Record::Scalar(v)).collect())
    }

    /// Pairs design rows with responses. Panics if lengths differ.
    pub fn from_design(design: &Matrix<T>, y: &[T]) -> Self {
        assert_eq!(design.rows(), y.len(), "one response per design row");
        Self::new(
            design
                .row_iter()
                .zip(y)
                .map(|(x, &y)| Record::Labeled { x: x.to_vec(), y })
                .collect(),
        )
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record<T>] {
        &self.records
    }

    /// Covariate rows of a regression dataset.
    pub fn design(&self) -> Option<Matrix<T>> {
        let rows: Option<Vec<&[T]>> = self
            .records
            .iter()
            .map(|r| match r {
                Record::Labeled { x, .. } => Some(x.as_slice()),
                Record::Scalar(_) => None,
            })
            .collect();
        rows.and_then(|rows| Matrix::from_rows(&rows))
    }
}

/// Model description before a design is attached; this is what a model
/// config file describes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec<T> {
    pub id: ModelId,
    pub d: usize,
    pub sigma0_sq: T,
    pub clip: ClipBounds<T>,
}

impl<T: Scalar> ModelSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidConfig("d must be positive".into()));
        }
        if self.id == ModelId::GaussianMean && self.d != 1 {
            return Err(Error::InvalidConfig("gaussian_mean has d = 1".into()));
        }
        if !(self.sigma0_sq > T::zero()) || !self.sigma0_sq.is_finite() {
            return Err(Error::InvalidConfig("sigma0_sq must be positive".into()));
        }
        self.clip.validate(self.id)
    }

    /// Attaches the public design (required exactly for regression models).
    /// Design rows are clipped to the feature bound.
    pub fn bind(&self, design: Option<Matrix<T>>) -> Result<ExpFamModel<T>> {
        self.validate()?;
        let design = match (self.id.is_regression(), design) {
            (false, None) => None,
            (false, Some(_)) => {
                return Err(Error::InvalidConfig("gaussian_mean takes no design".into()))
            }
            (true, None) => {
                return Err(Error::InvalidConfig(format!("{} requires a design", self.id)))
            }
            (true, Some(mut m)) => {
                if m.cols() != self.d {
                    return Err(Error::DimensionMismatch {
                        expected: self.d,
                        found: m.cols(),
                    });
                }
                if m.rows() == 0 {
                    return Err(Error::EmptyDataset);
                }
                let bx = self.clip.b_x.expect("validated");
                for i in 0..m.rows() {
                    clip_norm(m.row_mut(i), bx);
                }
                Some(m)
            }
        };
        Ok(ExpFamModel {
            spec: self.clone(),
            design,
        })
    }
}

/// An exponential-family model ready for evaluation. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpFamModel<T> {
    spec: ModelSpec<T>,
    design: Option<Matrix<T>>,
}

/// Outcome of inverting the mean map.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseSolution<T> {
    pub theta: Vec<T>,
    pub iterations: usize,
    pub residual_norm: T,
    /// True when at least one coordinate sits on the parameter box.
    pub at_bound: bool,
}

impl<T: Scalar> ExpFamModel<T> {
    pub fn gaussian_mean(sigma0_sq: T, b: T) -> Result<Self> {
        ModelSpec {
            id: ModelId::GaussianMean,
            d: 1,
            sigma0_sq,
            clip: ClipBounds::gaussian(b),
        }
        .bind(None)
    }

    pub fn logistic(design: Matrix<T>, b_x: T) -> Result<Self> {
        ModelSpec {
            id: ModelId::Logistic,
            d: design.cols(),
            sigma0_sq: T::one(),
            clip: ClipBounds::logistic(b_x),
        }
        .bind(Some(design))
    }

    pub fn poisson(design: Matrix<T>, b_x: T, b_y: T) -> Result<Self> {
        ModelSpec {
            id: ModelId::Poisson,
            d: design.cols(),
            sigma0_sq: T::one(),
            clip: ClipBounds::poisson(b_x, b_y),
        }
        .bind(Some(design))
    }

    /// Same family and bounds over a different public design.
    pub fn with_design(&self, design: Matrix<T>) -> Result<Self> {
        self.spec.bind(Some(design))
    }

    pub fn spec(&self) -> &ModelSpec<T> {
        &self.spec
    }

    pub fn id(&self) -> ModelId {
        self.spec.id
    }

    pub fn d(&self) -> usize {
        self.spec.d
    }

    pub fn sigma0_sq(&self) -> T {
        self.spec.sigma0_sq
    }

    pub fn clip(&self) -> &ClipBounds<T> {
        &self.spec.clip
    }

    pub fn design(&self) -> Option<&Matrix<T>> {
        self.design.as_ref()
    }

    pub fn n_design(&self) -> Option<usize> {
        self.design.as_ref().map(Matrix::rows)
    }

    fn check_theta(&self, theta: &[T]) -> Result<()> {
        if theta.len() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                found: theta.len(),
            });
        }
        Ok(())
    }

    pub fn suff_stat(&self, r: &Record<T>) -> Vec<T> {
        match r {
            Record::Scalar(x) => vec![*x],
            Record::Labeled { x, y } => x.iter().map(|&xi| *y * xi).collect(),
        }
    }

    /// Projects a record so that `‖s(r)‖₂ ≤ B`. Records already inside the
    /// bounds come back unchanged, so the map is idempotent.
    pub fn clip_record(&self, r: &Record<T>) -> Record<T> {
        let clip = &self.spec.clip;
        match r {
            Record::Scalar(x) => Record::Scalar(x.max(-clip.b).min(clip.b)),
            Record::Labeled { x, y } => {
                let mut x = x.clone();
                clip_norm(&mut x, clip.b_x.unwrap_or(clip.b));
                let y = match clip.b_y {
                    Some(by) => y.max(T::zero()).min(by),
                    None => *y,
                };
                Record::Labeled { x, y }
            }
        }
    }

    pub fn clip_dataset(&self, data: &Dataset<T>) -> Dataset<T> {
        Dataset {
            records: data.records.iter().map(|r| self.clip_record(r)).collect(),
            provenance: data.provenance.clone(),
        }
    }

    /// `n⁻¹ Σ s(xᵢ)`. Records are expected to be clipped already.
    pub fn mean_suff_stat(&self, data: &Dataset<T>) -> Result<Vec<T>> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut acc = vec![T::zero(); self.d()];
        for r in &data.records {
            let s = self.suff_stat(r);
            if s.len() != acc.len() {
                return Err(Error::DimensionMismatch {
                    expected: acc.len(),
                    found: s.len(),
                });
            }
            for (a, v) in acc.iter_mut().zip(s) {
                *a += v;
            }
        }
        let n = T::from_usize(data.n()).expect("record count");
        Ok(acc.into_iter().map(|a| a / n).collect())
    }

    fn design_or_panic(&self) -> &Matrix<T> {
        self.design.as_ref().expect("regression model carries a design")
    }

    fn linear_predictor(&self, row: &[T], theta: &[T]) -> Result<T> {
        let eta: T = row.iter().zip(theta).map(|(&a, &b)| a * b).sum();
        if self.id() == ModelId::Poisson && eta > T::cst(MAX_LINEAR_PREDICTOR) {
            return Err(Error::MeanOverflow {
                eta: eta.to_f64_lossy(),
            });
        }
        Ok(eta)
    }

    /// `A(θ)`; for regression models the design average of the per-row
    /// log-partition.
    pub fn log_partition(&self, theta: &[T]) -> Result<T> {
        self.check_theta(theta)?;
        match self.id() {
            ModelId::GaussianMean => Ok(self.sigma0_sq() * theta[0] * theta[0] / T::cst(2.0)),
            id => {
                let design = self.design_or_panic();
                let mut total = T::zero();
                for row in design.row_iter() {
                    let eta = self.linear_predictor(row, theta)?;
                    total += match id {
                        ModelId::Logistic => softplus(eta),
                        _ => eta.exp(),
                    };
                }
                Ok(total / T::from_usize(design.rows()).expect("rows"))
            }
        }
    }

    /// Mean parameter `μ(θ) = ∇A(θ)`.
    pub fn grad_log_partition(&self, theta: &[T]) -> Result<Vec<T>> {
        Ok(self.mean_and_fisher(theta, false)?.0)
    }

    /// `I(θ) = ∇²A(θ)`.
    pub fn fisher_info(&self, theta: &[T]) -> Result<Matrix<T>> {
        Ok(self.mean_and_fisher(theta, true)?.1.expect("requested"))
    }

    /// `∇A(θ)` and, when asked, `∇²A(θ)` in one pass over the design.
    pub fn mean_and_fisher(&self, theta: &[T], with_fisher: bool) -> Result<(Vec<T>, Option<Matrix<T>>)> {
        self.check_theta(theta)?;
        let d = self.d();
        match self.id() {
            ModelId::GaussianMean => {
                let s2 = self.sigma0_sq();
                Ok((vec![s2 * theta[0]], with_fisher.then(|| Matrix::diagonal(&[s2]))))
            }
            id => {
                let design = self.design_or_panic();
                let mut mu = vec![T::zero(); d];
                let mut fisher = with_fisher.then(|| Matrix::zeros(d, d));
                for row in design.row_iter() {
                    let eta = self.linear_predictor(row, theta)?;
                    let (mean, weight) = match id {
                        ModelId::Logistic => {
                            let p = sigmoid(eta);
                            (p, p * (T::one() - p))
                        }
                        _ => {
                            let m = eta.exp();
                            (m, m)
                        }
                    };
                    for (acc, &x) in mu.iter_mut().zip(row) {
                        *acc += mean * x;
                    }
                    if let Some(f) = fisher.as_mut() {
                        for i in 0..d {
                            let wi = weight * row[i];
                            for j in i..d {
                                f[(i, j)] += wi * row[j];
                            }
                        }
                    }
                }
                let n = T::from_usize(design.rows()).expect("rows");
                mu.iter_mut().for_each(|m| *m /= n);
                if let Some(f) = fisher.as_mut() {
                    for i in 0..d {
                        for j in i..d {
                            let v = f[(i, j)] / n;
                            f[(i, j)] = v;
                            f[(j, i)] = v;
                        }
                    }
                }
                Ok((mu, fisher))
            }
        }
    }

    /// Gradient of `θ ↦ vᵀ I(θ) v`, i.e. the third derivative of `A`
    /// contracted twice with `v`.
    pub fn fisher_derivative_contract(&self, theta: &[T], v: &[T]) -> Result<Vec<T>> {
        self.check_theta(theta)?;
        let d = self.d();
        match self.id() {
            ModelId::GaussianMean => Ok(vec![T::zero(); d]),
            id => {
                let design = self.design_or_panic();
                let mut g = vec![T::zero(); d];
                for row in design.row_iter() {
                    let eta = self.linear_predictor(row, theta)?;
                    let dw = match id {
                        ModelId::Logistic => {
                            let p = sigmoid(eta);
                            p * (T::one() - p) * (T::one() - T::cst(2.0) * p)
                        }
                        _ => eta.exp(),
                    };
                    let xv: T = row.iter().zip(v).map(|(&a, &b)| a * b).sum();
                    let c = dw * xv * xv;
                    for (gk, &xk) in g.iter_mut().zip(row) {
                        *gk += c * xk;
                    }
                }
                let n = T::from_usize(design.rows()).expect("rows");
                Ok(g.into_iter().map(|x| x / n).collect())
            }
        }
    }

    /// `(∇A)⁻¹(s)` restricted to the parameter box.
    pub fn inverse_mean_map(&self, s: &[T]) -> Result<Vec<T>> {
        Ok(self.inverse_mean_map_detailed(s)?.theta)
    }

    /// Minimizes `‖∇A(θ) − s‖₂` over `[-10, 10]^d`.
    ///
    /// Damped Newton with `I(θ)` as the Jacobian runs first. If it cannot make
    /// progress (typically because `s` lies outside the attainable mean set and
    /// the iterate runs into the box), a box-constrained quasi-Newton search on
    /// `½‖∇A(θ) − s‖²` takes over, and Newton polishes any interior result.
    pub fn inverse_mean_map_detailed(&self, s: &[T]) -> Result<InverseSolution<T>> {
        self.check_theta(s)?;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite statistic".into()));
        }
        let (lo, hi) = (T::cst(-THETA_BOX), T::cst(THETA_BOX));
        let scale = T::one().max(norm2(s));
        let res_tol = T::tol(1e-8) * scale;
        let mut iterations = 0;

        let newton = self.newton_inverse(s, vec![T::zero(); self.d()], res_tol, &mut iterations)?;
        if newton.1 <= res_tol {
            return Ok(self.solution(newton.0, newton.1, iterations));
        }

        let opts = BoxOptions {
            lower: lo,
            upper: hi,
            grad_tol: T::tol(1e-10) * scale,
            max_iter: MAX_FALLBACK_ITER,
        };
        let fallback = minimize_in_box(
            |theta: &[T]| -> Result<(T, Vec<T>)> {
                let (mu, fisher) = self.mean_and_fisher(theta, true)?;
                let r: Vec<T> = mu.iter().zip(s).map(|(&m, &t)| m - t).collect();
                let f = r.iter().map(|&x| x * x).sum::<T>() / T::cst(2.0);
                Ok((f, fisher.expect("requested").mul_vec(&r)))
            },
            &newton.0,
            &opts,
        )?;
        iterations += fallback.iterations;
        let mut theta = fallback.x;
        let mut residual = self.residual_norm(&theta, s)?;

        let interior = theta.iter().all(|&t| t > lo && t < hi);
        if residual > res_tol && interior {
            let polished = self.newton_inverse(s, theta.clone(), res_tol, &mut iterations)?;
            if polished.1 < residual {
                theta = polished.0;
                residual = polished.1;
            }
        }

        let stalled_ok = fallback.stalled && fallback.proj_grad_norm <= T::tol(1e-6) * scale;
        if residual <= res_tol || fallback.converged || stalled_ok {
            Ok(self.solution(theta, residual, iterations))
        } else {
            Err(Error::SolverDiverged {
                last: to_f64_vec(&theta),
                iterations,
                residual: residual.to_f64_lossy(),
            })
        }
    }

    fn solution(&self, theta: Vec<T>, residual: T, iterations: usize) -> InverseSolution<T> {
        let b = T::cst(THETA_BOX);
        let at_bound = theta.iter().any(|t| t.abs() >= b);
        InverseSolution {
            theta,
            iterations,
            residual_norm: residual,
            at_bound,
        }
    }

    fn residual_norm(&self, theta: &[T], s: &[T]) -> Result<T> {
        let mu = self.grad_log_partition(theta)?;
        Ok(mu.iter().zip(s).map(|(&m, &t)| (m - t) * (m - t)).sum::<T>().sqrt())
    }

    /// Returns the last accepted iterate and its residual norm.
    fn newton_inverse(&self, s: &[T], start: Vec<T>, tol: T, iterations: &mut usize) -> Result<(Vec<T>, T)> {
        let (lo, hi) = (T::cst(-THETA_BOX), T::cst(THETA_BOX));
        let mut theta = start;
        let (mu, fisher) = self.mean_and_fisher(&theta, true)?;
        let mut r: Vec<T> = mu.iter().zip(s).map(|(&m, &t)| m - t).collect();
        let mut fisher = fisher.expect("requested");
        let mut rn = norm2(&r);
        let mut projected_streak = 0;

        for _ in 0..MAX_NEWTON_ITER {
            if rn <= tol {
                break;
            }
            let Some(step) = regularized_solve(&fisher, &r) else {
                break;
            };
            *iterations += 1;
            let mut t = T::one();
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let mut cand: Vec<T> = theta.iter().zip(&step).map(|(&a, &b)| a - t * b).collect();
                let raw = cand.clone();
                project(&mut cand, lo, hi);
                let clipped = cand != raw;
                let (mu_c, fisher_c) = match self.mean_and_fisher(&cand, true) {
                    Ok(v) => v,
                    Err(Error::MeanOverflow { .. }) => {
                        t = t / T::cst(2.0);
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let r_c: Vec<T> = mu_c.iter().zip(s).map(|(&m, &v)| m - v).collect();
                let rn_c = norm2(&r_c);
                if rn_c < rn {
                    accepted = Some((cand, r_c, rn_c, fisher_c.expect("requested"), clipped));
                    break;
                }
                t = t / T::cst(2.0);
            }
            let Some((cand, r_c, rn_c, fisher_c, clipped)) = accepted else {
                break;
            };
            theta = cand;
            r = r_c;
            rn = rn_c;
            fisher = fisher_c;
            projected_streak = if clipped { projected_streak + 1 } else { 0 };
            if projected_streak >= 3 {
                break;
            }
        }
        Ok((theta, rn))
    }

    /// Draws `n` records at `θ`. Regression models cycle through the design
    /// when `n` equals the number of design rows and otherwise resample rows
    /// uniformly with replacement. Draws are not clipped.
    pub fn sample<R: RngCore + ?Sized>(&self, theta: &[T], n: usize, rng: &mut R) -> Result<Dataset<T>> {
        self.check_theta(theta)?;
        let theta64 = to_f64_vec(theta);
        let records = match self.id() {
            ModelId::GaussianMean => {
                let s2 = self.sigma0_sq().to_f64_lossy();
                let (mean, sd) = (s2 * theta64[0], s2.sqrt());
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        Record::Scalar(T::cst(mean + sd * z))
                    })
                    .collect()
            }
            id => {
                let design = self.design_or_panic();
                let rows = design.rows();
                let resample = n != rows;
                (0..n)
                    .map(|i| {
                        let row = if resample { rng.random_range(0..rows) } else { i };
                        let x = design.row(row);
                        let eta: f64 = x.iter().zip(&theta64).map(|(a, b)| a.to_f64_lossy() * b).sum();
                        let y = draw_response(id, eta, rng);
                        Record::Labeled {
                            x: x.to_vec(),
                            y: T::cst(y),
                        }
                    })
                    .collect()
            }
        };
        Ok(Dataset::new(records))
    }
}

pub(crate) fn draw_response<R: RngCore + ?Sized>(id: ModelId, eta: f64, rng: &mut R) -> f64 {
    match id {
        ModelId::Logistic => {
            let p = 1.0 / (1.0 + (-eta).exp());
            if rng.random::<f64>() < p {
                1.0
            } else {
                0.0
            }
        }
        ModelId::Poisson => {
            let rate = eta.min(MAX_LINEAR_PREDICTOR).exp();
            if rate <= 0.0 {
                return 0.0;
            }
            match Poisson::new(rate) {
                Ok(dist) => dist.sample(rng),
                Err(_) => rate.round(),
            }
        }
        ModelId::GaussianMean => unreachable!("gaussian records have no response"),
    }
}

/// Radial projection onto the ball of radius `bound`; vectors inside are left
/// untouched and results are guaranteed to land inside.
pub(crate) fn clip_norm<T: Scalar>(x: &mut [T], bound: T) {
    let norm = norm2(x);
    if norm <= bound {
        return;
    }
    let scale = bound / norm;
    x.iter_mut().for_each(|v| *v *= scale);
    let shrink = T::one() - T::epsilon();
    while norm2(x) > bound {
        x.iter_mut().for_each(|v| *v *= shrink);
    }
}

/// Solves `A x = b` for a PSD information matrix, adding a small ridge when
/// the matrix is numerically singular.
fn regularized_solve<T: Scalar>(a: &Matrix<T>, b: &[T]) -> Option<Vec<T>> {
    if let Some(ch) = a.cholesky() {
        return Some(ch.solve(b));
    }
    let trace: T = a.diag().into_iter().sum();
    let mut ridge = T::tol(1e-12) * (T::one() + trace.abs());
    for _ in 0..6 {
        let mut m = a.clone();
        m.add_diag(ridge);
        if let Some(ch) = m.cholesky() {
            return Some(ch.solve(b));
        }
        ridge *= T::cst(100.0);
    }
    None
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(eta: T) -> T {
    if eta >= T::zero() {
        T::one() / (T::one() + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(eta: T) -> T {
    if eta > T::zero() {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn ones(n: usize) -> Matrix<f64> {
        Matrix::from_row_major(n, 1, vec![1.0; n])
    }

    fn gaussian() -> ExpFamModel<f64> {
        ExpFamModel::gaussian_mean(1.0, 1.0).unwrap()
    }

    fn normal_design(n: usize, d: usize, seed: u64) -> Matrix<f64> {
        let mut rng = SeededRng::new(seed);
        let data: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        Matrix::from_row_major(n, d, data)
    }

    fn models(d: usize) -> Vec<ExpFamModel<f64>> {
        vec![
            ExpFamModel::gaussian_mean(1.7, 5.0).unwrap(),
            ExpFamModel::logistic(normal_design(300, d, 1), 3.0).unwrap(),
            ExpFamModel::poisson(normal_design(300, d, 2).scale(0.4), 3.0, 20.0).unwrap(),
        ]
    }

    #[test]
    fn clip_examples() {
        assert_eq!(gaussian().clip_record(&Record::Scalar(2.5)), Record::Scalar(1.0));

        let lg = ExpFamModel::logistic(ones(2), 3.0).unwrap();
        let Record::Labeled { x, y } = lg.clip_record(&Record::Labeled { x: vec![0.0, 4.0], y: 1.0 }) else {
            unreachable!()
        };
        assert!((x[1] - 3.0).abs() < 1e-15 && x[0] == 0.0 && y == 1.0);

        let po = ExpFamModel::poisson(ones(2), 3.0, 20.0).unwrap();
        let r = Record::Labeled { x: vec![2.0], y: 25.0 };
        assert_eq!(po.clip_record(&r), Record::Labeled { x: vec![2.0], y: 20.0 });
        assert_eq!(po.clip().b, 60.0);
    }

    #[test]
    fn mean_suff_stat_examples() {
        let g = gaussian();
        assert_eq!(g.mean_suff_stat(&Dataset::from_scalars(&[0.2, -0.2])).unwrap(), vec![0.0]);

        let lg = ExpFamModel::logistic(ones(2), 3.0).unwrap();
        let d = Dataset::from_design(&ones(2), &[1.0, 0.0]);
        assert_eq!(lg.mean_suff_stat(&d).unwrap(), vec![0.5]);

        let po = ExpFamModel::poisson(ones(2), 3.0, 20.0).unwrap();
        let d = Dataset::from_design(&ones(2), &[3.0, 5.0]);
        assert_eq!(po.mean_suff_stat(&d).unwrap(), vec![4.0]);

        assert!(matches!(g.mean_suff_stat(&Dataset::new(vec![])), Err(Error::EmptyDataset)));
    }

    #[test]
    fn mean_map_and_fisher_examples() {
        let g = gaussian();
        assert_eq!(g.grad_log_partition(&[0.5]).unwrap(), vec![0.5]);
        assert_eq!(g.fisher_info(&[3.0]).unwrap()[(0, 0)], 1.0);

        let lg = ExpFamModel::logistic(ones(4), 3.0).unwrap();
        assert_eq!(lg.grad_log_partition(&[0.0]).unwrap(), vec![0.5]);
        assert_eq!(lg.fisher_info(&[0.0]).unwrap()[(0, 0)], 0.25);

        let po = ExpFamModel::poisson(ones(4), 3.0, 20.0).unwrap();
        assert_eq!(po.grad_log_partition(&[0.0]).unwrap(), vec![1.0]);
        assert_eq!(po.fisher_info(&[0.0]).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn poisson_overflow_is_reported() {
        let po = ExpFamModel::poisson(ones(3), 3.0, 20.0).unwrap();
        assert!(matches!(po.grad_log_partition(&[701.0]), Err(Error::MeanOverflow { .. })));
        assert!(matches!(po.fisher_info(&[701.0]), Err(Error::MeanOverflow { .. })));
    }

    #[test]
    fn inverse_examples() {
        assert!((gaussian().inverse_mean_map(&[0.5]).unwrap()[0] - 0.5).abs() < 1e-12);
        let lg = ExpFamModel::logistic(ones(4), 3.0).unwrap();
        assert!(lg.inverse_mean_map(&[0.5]).unwrap()[0].abs() < 1e-12);
        // sigmoid(1) from an independent evaluation: 1 / (1 + e^-1).
        let target = 0.731058578;
        let theta = lg.inverse_mean_map(&[target]).unwrap()[0];
        assert!((theta - 1.0).abs() < 1e-6, "{theta}");
    }

    #[test]
    fn out_of_range_statistic_goes_to_the_box() {
        let lg = ExpFamModel::logistic(ones(4), 3.0).unwrap();
        let sol = lg.inverse_mean_map_detailed(&[1.3]).unwrap();
        assert_eq!(sol.theta, vec![THETA_BOX]);
        assert!(sol.at_bound);
        let sol = lg.inverse_mean_map_detailed(&[-0.4]).unwrap();
        assert_eq!(sol.theta, vec![-THETA_BOX]);

        let g = gaussian();
        assert_eq!(g.inverse_mean_map(&[42.0]).unwrap(), vec![THETA_BOX]);
    }

    #[test]
    fn out_of_range_multivariate_logistic_is_boundary_minimizer() {
        let lg = ExpFamModel::logistic(normal_design(400, 5, 9), 3.0).unwrap();
        let s = [0.9, -0.8, 0.1, 0.7, -0.05];
        let sol = lg.inverse_mean_map_detailed(&s).unwrap();
        assert!(sol.at_bound);
        // First-order optimality of ½‖μ − s‖² on the box.
        let (mu, f) = lg.mean_and_fisher(&sol.theta, true).unwrap();
        let r: Vec<f64> = mu.iter().zip(&s).map(|(a, b)| a - b).collect();
        let g = f.unwrap().mul_vec(&r);
        for (t, gi) in sol.theta.iter().zip(&g) {
            if t.abs() < THETA_BOX {
                assert!(gi.abs() < 1e-7, "free coordinate gradient {gi}");
            } else {
                assert!(t.signum() * gi <= 1e-12, "bound not optimal: {t} {gi}");
            }
        }
    }

    #[test]
    fn fisher_derivative_matches_finite_differences() {
        for m in models(3).into_iter().skip(1) {
            let theta = [0.3, -0.2, 0.4];
            let v = [0.5, 1.0, -0.7];
            let g = m.fisher_derivative_contract(&theta, &v).unwrap();
            let quad = |t: &[f64]| {
                let f = m.fisher_info(t).unwrap();
                let fv = f.mul_vec(&v);
                fv.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()
            };
            for k in 0..3 {
                let h = 1e-5;
                let mut tp = theta;
                let mut tm = theta;
                tp[k] += h;
                tm[k] -= h;
                let fd = (quad(&tp) - quad(&tm)) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-7 * (1.0 + fd.abs()), "{:?} k={k}: {fd} vs {}", m.id(), g[k]);
            }
        }
    }

    #[test]
    fn f32_fisher_tracks_f64() {
        let d64 = normal_design(200, 2, 5);
        let d32 = Matrix::from_row_major(200, 2, d64.as_slice().iter().map(|&v| v as f32).collect());
        let m64 = ExpFamModel::logistic(d64, 3.0).unwrap();
        let m32 = ExpFamModel::<f32>::logistic(d32, 3.0).unwrap();
        let f64_ = m64.fisher_info(&[0.4, -0.3]).unwrap();
        let f32_ = m32.fisher_info(&[0.4, -0.3]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((f64_[(i, j)] - f32_[(i, j)] as f64).abs() < 1e-5);
            }
        }
        let theta = m32.inverse_mean_map(&m32.grad_log_partition(&[0.4, -0.3]).unwrap()).unwrap();
        assert!((theta[0] - 0.4).abs() < 1e-3 && (theta[1] + 0.3).abs() < 1e-3);
    }

    #[test]
    fn regression_requires_design() {
        let spec = ModelSpec {
            id: ModelId::Logistic,
            d: 2,
            sigma0_sq: 1.0,
            clip: ClipBounds::logistic(3.0),
        };
        assert!(spec.bind(None).is_err());
        assert!(matches!(spec.bind(Some(ones(3))), Err(Error::DimensionMismatch { .. })));
        let bad = ModelSpec {
            clip: ClipBounds { b: 2.0, b_x: Some(3.0), b_y: None },
            ..spec
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sample_law_of_large_numbers() {
        let n = 1_000_000;
        let mut rng = SeededRng::new(101);
        let g = gaussian();
        let d = g.sample(&[0.0], n, &mut rng).unwrap();
        let mean = g.mean_suff_stat(&d).unwrap()[0];
        assert!(mean.abs() < 0.005, "{mean}");

        let lg = ExpFamModel::logistic(normal_design(1000, 3, 4), 3.0).unwrap();
        let d = lg.sample(&[0.0, 0.0, 0.0], n, &mut rng).unwrap();
        let frac = d.records().iter().filter(|r| matches!(r, Record::Labeled { y, .. } if *y == 1.0)).count() as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.002, "{frac}");

        let po = ExpFamModel::poisson(ones(1000), 3.0, 20.0).unwrap();
        let d = po.sample(&[0.0], n, &mut rng).unwrap();
        let ybar = po.mean_suff_stat(&d).unwrap()[0];
        assert!((ybar - 1.0).abs() < 0.005, "{ybar}");
    }

    #[test]
    fn sample_cycles_design_when_sizes_match() {
        let design = normal_design(50, 2, 3);
        let lg = ExpFamModel::logistic(design.clone(), 30.0).unwrap();
        let d = lg.sample(&[0.1, 0.2], 50, &mut SeededRng::new(1)).unwrap();
        assert_eq!(d.design().unwrap(), design);
        let d = lg.sample(&[0.1, 0.2], 80, &mut SeededRng::new(1)).unwrap();
        assert_eq!(d.n(), 80);
    }

    fn central_diff<F: Fn(&[f64]) -> Vec<f64>>(f: F, theta: &[f64], h: f64) -> Matrix<f64> {
        let d = theta.len();
        let mut jac = Matrix::zeros(d, d);
        for k in 0..d {
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[k] += h;
            tm[k] -= h;
            let (fp, fm) = (f(&tp), f(&tm));
            for i in 0..d {
                jac[(i, k)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        jac
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-3)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn fisher_is_jacobian_of_mean_map(t in proptest::collection::vec(-2.0f64..2.0, 3)) {
            for m in models(3) {
                let theta = &t[..m.d()];
                let fisher = m.fisher_info(theta).unwrap();
                let jac = central_diff(|th| m.grad_log_partition(th).unwrap(), theta, 1e-5);
                for i in 0..m.d() {
                    for j in 0..m.d() {
                        prop_assert!(close(fisher[(i, j)], jac[(i, j)], 1e-5),
                            "{:?} ({i},{j}): {} vs {}", m.id(), fisher[(i, j)], jac[(i, j)]);
                    }
                }
                if m.id() == ModelId::GaussianMean {
                    // Second difference of the closed-form log-partition.
                    let h = 1e-4;
                    let a = |x: f64| m.log_partition(&[x]).unwrap();
                    let second = (a(theta[0] + h) - 2.0 * a(theta[0]) + a(theta[0] - h)) / (h * h);
                    prop_assert!(close(second, fisher[(0, 0)], 1e-5));
                }
                let grad = m.grad_log_partition(theta).unwrap();
                let fd = central_diff(|th| vec![m.log_partition(th).unwrap(); m.d()], theta, 1e-6);
                for (k, g) in grad.iter().enumerate() {
                    prop_assert!(close(*g, fd[(0, k)], 1e-5));
                }
            }
        }

        #[test]
        fn inverse_round_trip(t in proptest::collection::vec(-2.0f64..2.0, 3)) {
            for m in models(3) {
                let theta = &t[..m.d()];
                let s = m.grad_log_partition(theta).unwrap();
                let back = m.inverse_mean_map(&s).unwrap();
                for (a, b) in back.iter().zip(theta) {
                    prop_assert!((a - b).abs() < 1e-6, "{:?}: {:?} vs {:?}", m.id(), back, theta);
                }
            }
        }

        #[test]
        fn clipping_bounds_and_idempotence(
            x in proptest::collection::vec(-50.0f64..50.0, 4),
            y in -5.0f64..60.0,
            label in proptest::bool::ANY,
        ) {
            let design = normal_design(4, 4, 0);
            let lg = ExpFamModel::logistic(design.clone(), 3.0).unwrap();
            let po = ExpFamModel::poisson(design, 3.0, 20.0).unwrap();
            let g = ExpFamModel::gaussian_mean(1.0, 5.0).unwrap();
            let cases = [
                (&lg, Record::Labeled { x: x.clone(), y: if label { 1.0 } else { 0.0 } }),
                (&po, Record::Labeled { x: x.clone(), y }),
                (&g, Record::Scalar(x[0])),
            ];
            for (m, r) in cases {
                let once = m.clip_record(&r);
                prop_assert!(norm2(&m.suff_stat(&once)) <= m.clip().b + 1e-12);
                prop_assert_eq!(m.clip_record(&once), once.clone());
            }
        }
    }
}
