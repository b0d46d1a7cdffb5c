//! Sensitivity, analytic Gaussian mechanism calibration, and the one-shot
//! release of a clipped mean sufficient statistic.
//!
//! Calibration runs in `f64` regardless of the model scalar: the tightness of
//! the privacy condition is the one place where the extra precision matters.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::expfam::{ExpFamModel, ModelId};
use crate::scalar::{norm2, Scalar};
use crate::special::normal_cdf;

/// An `(epsilon, delta)` guarantee. `epsilon = inf` is accepted as a
/// zero-noise sentinel for testing; it carries no privacy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyBudget {
    epsilon: f64,
    delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidBudget(format!("epsilon must be positive, got {epsilon}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidBudget(format!("delta must lie in (0, 1), got {delta}")));
        }
        Ok(Self { epsilon, delta })
    }

    /// Budget with `delta = 1/n²`.
    pub fn with_default_delta(epsilon: f64, n: usize) -> Result<Self> {
        let n = n as f64;
        Self::new(epsilon, 1.0 / (n * n))
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn is_zero_noise(&self) -> bool {
        self.epsilon.is_infinite()
    }
}

/// `Δ₂ = 2B/n`: replacing one record moves the mean by at most this much.
pub fn l2_sensitivity(b: f64, n: usize) -> f64 {
    2.0 * b / n as f64
}

/// The analytic Gaussian mechanism's achieved `δ` at noise scale `sigma`:
/// `Φ(Δ/(2σ) − εσ/Δ) − e^ε Φ(−Δ/(2σ) − εσ/Δ)`.
pub fn verify_agm_condition(sigma: f64, delta2: f64, epsilon: f64) -> f64 {
    if sigma <= 0.0 {
        return if epsilon.is_infinite() { 0.0 } else { 1.0 };
    }
    if epsilon.is_infinite() {
        return 0.0;
    }
    let a = delta2 / (2.0 * sigma);
    let b = epsilon * sigma / delta2;
    let val = normal_cdf(a - b) - epsilon.exp() * normal_cdf(-a - b);
    val.max(0.0)
}

/// Smallest `σ` meeting the AGM condition for `(delta2, ε, δ)`, by bisection
/// to relative width `1e-12`. The feasible end of the bracket is returned, so
/// the achieved `δ` never exceeds the requested one.
pub fn calibrate_agm(delta2: f64, budget: &PrivacyBudget) -> f64 {
    assert!(delta2 > 0.0 && delta2.is_finite(), "sensitivity must be positive");
    if budget.is_zero_noise() {
        return 0.0;
    }
    let (eps, delta) = (budget.epsilon, budget.delta);
    let feasible = |s: f64| verify_agm_condition(s, delta2, eps) <= delta;

    let classical = delta2 * (2.0 * (1.25 / delta).ln()).sqrt() / eps;
    let mut lo = 1e-12 * delta2;
    let mut hi = 2.0 * classical;
    while !feasible(hi) {
        lo = hi;
        hi *= 2.0;
    }
    if feasible(lo) {
        return lo;
    }
    while hi - lo > 1e-12 * hi {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// A privatized mean sufficient statistic with its public metadata. This is
/// the only object derived from raw data that downstream code may see.
#[derive(Debug, Clone, PartialEq)]
pub struct ReleasedStatistic<T> {
    pub model_id: ModelId,
    pub d: usize,
    pub n: usize,
    /// ℓ₂ bound on the per-record statistic.
    pub b: f64,
    pub budget: PrivacyBudget,
    /// Per-coordinate noise standard deviation.
    pub sigma: f64,
    pub s_tilde: Vec<T>,
    pub seed_tag: Option<String>,
}

impl<T: Scalar> ReleasedStatistic<T> {
    pub fn sensitivity(&self) -> f64 {
        l2_sensitivity(self.b, self.n)
    }

    /// Consistency checks for releases read back from disk.
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.s_tilde.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                found: self.s_tilde.len(),
            });
        }
        if self.n == 0 {
            return Err(Error::Schema("release has n = 0".into()));
        }
        if !(self.b > 0.0) || !self.b.is_finite() {
            return Err(Error::Schema("release bound B must be positive".into()));
        }
        if self.s_tilde.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema("s_tilde must be finite".into()));
        }
        let expected = calibrate_agm(self.sensitivity(), &self.budget);
        if (self.sigma - expected).abs() > 1e-9 * expected {
            return Err(Error::Schema(format!(
                "sigma {} does not match calibration {expected}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Checks that the release belongs to this model.
    pub fn check_model(&self, model: &ExpFamModel<T>) -> Result<()> {
        if self.d != model.d() {
            return Err(Error::DimensionMismatch {
                expected: model.d(),
                found: self.d,
            });
        }
        if self.model_id != model.id() {
            return Err(Error::Schema(format!(
                "release is for {}, model is {}",
                self.model_id,
                model.id()
            )));
        }
        Ok(())
    }
}

/// Adds calibrated Gaussian noise to a clipped mean statistic.
pub fn release<T: Scalar, R: RngCore + ?Sized>(
    s_bar: &[T],
    model: &ExpFamModel<T>,
    n: usize,
    budget: PrivacyBudget,
    rng: &mut R,
) -> Result<ReleasedStatistic<T>> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if s_bar.len() != model.d() {
        return Err(Error::DimensionMismatch {
            expected: model.d(),
            found: s_bar.len(),
        });
    }
    let b = model.clip().b.to_f64_lossy();
    let sigma = calibrate_agm(l2_sensitivity(b, n), &budget);
    release_calibrated(s_bar, model, n, budget, sigma, rng)
}

/// [`release`] with `sigma` already computed by [`calibrate_agm`] for this
/// `(B, n, budget)`; lets simulation loops calibrate once per cell.
pub(crate) fn release_calibrated<T: Scalar, R: RngCore + ?Sized>(
    s_bar: &[T],
    model: &ExpFamModel<T>,
    n: usize,
    budget: PrivacyBudget,
    sigma: f64,
    rng: &mut R,
) -> Result<ReleasedStatistic<T>> {
    let b = model.clip().b.to_f64_lossy();
    let norm = norm2(s_bar).to_f64_lossy();
    // Averages of clipped records can exceed B only through rounding.
    if !(norm <= b * (1.0 + 1e-12)) {
        return Err(Error::SensitivityViolated { norm, bound: b });
    }
    let s_tilde = s_bar
        .iter()
        .map(|&s| {
            if sigma == 0.0 {
                s
            } else {
                let z: f64 = StandardNormal.sample(rng);
                T::cst(s.to_f64_lossy() + sigma * z)
            }
        })
        .collect();
    Ok(ReleasedStatistic {
        model_id: model.id(),
        d: model.d(),
        n,
        b,
        budget,
        sigma,
        s_tilde,
        seed_tag: None,
    })
}

#[derive(Serialize, Deserialize)]
struct ReleaseWire<T> {
    model_id: ModelId,
    d: usize,
    n: usize,
    #[serde(rename = "B")]
    b: f64,
    /// `null` stands for the zero-noise sentinel.
    epsilon: Option<f64>,
    delta: f64,
    sigma: f64,
    s_tilde: Vec<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed_tag: Option<String>,
}

impl<T: Scalar> Serialize for ReleasedStatistic<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let eps = self.budget.epsilon;
        ReleaseWire {
            model_id: self.model_id,
            d: self.d,
            n: self.n,
            b: self.b,
            epsilon: eps.is_finite().then_some(eps),
            delta: self.budget.delta,
            sigma: self.sigma,
            s_tilde: self.s_tilde.clone(),
            seed_tag: self.seed_tag.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for ReleasedStatistic<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let w = ReleaseWire::<T>::deserialize(deserializer)?;
        let budget = PrivacyBudget::new(w.epsilon.unwrap_or(f64::INFINITY), w.delta)
            .map_err(serde::de::Error::custom)?;
        Ok(Self {
            model_id: w.model_id,
            d: w.d,
            n: w.n,
            b: w.b,
            budget,
            sigma: w.sigma,
            s_tilde: w.s_tilde,
            seed_tag: w.seed_tag,
        })
    }
}
