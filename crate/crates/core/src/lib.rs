//! Differentially private release of exponential-family sufficient statistics,
//! followed by noise-calibrated inference and parametric synthetic data.
//!
//! The pipeline has one privacy boundary. Raw records are clipped, averaged into
//! a sufficient statistic and released once through the analytic Gaussian
//! mechanism ([`privacy::release`]). Everything downstream ([`estimate`],
//! [`synthgen`], [`harness`]) consumes only the [`ReleasedStatistic`] and the
//! public model structure, so it inherits the same `(epsilon, delta)` guarantee.
//!
//! The numerical core is generic over the scalar type ([`Scalar`] is implemented
//! for `f32` and `f64`). Privacy calibration always runs in `f64`. The aliases at
//! the crate root fix the scalar to `f64`, which is what the CLI and the
//! experiment harness use.

pub mod cli;
pub mod error;
pub mod estimate;
pub mod expfam;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod optim;
pub mod privacy;
pub mod rng;
pub mod scalar;
pub mod special;
pub mod synthgen;

pub use error::{Error, Result};
pub use estimate::{BootstrapConfig, EstimateReport, Method};
pub use expfam::{ClipBounds, Dataset, ExpFamModel, ModelId, ModelSpec, Record};
pub use linalg::Matrix;
pub use privacy::{PrivacyBudget, ReleasedStatistic};
pub use rng::SeededRng;
pub use scalar::Scalar;
pub use synthgen::{SourceEstimator, SynthConfig};

/// Double-precision model.
pub type Model = ExpFamModel<f64>;
/// Double-precision dataset.
pub type Data = Dataset<f64>;
/// Double-precision released statistic.
pub type Release = ReleasedStatistic<f64>;
/// Double-precision estimator output.
pub type Report = EstimateReport<f64>;
/// Double-precision dense matrix.
pub type Mat = Matrix<f64>;

/// Single-precision model, mostly useful for memory-bound batch evaluation.
pub type ModelF32 = ExpFamModel<f32>;
