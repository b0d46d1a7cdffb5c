//! Data generation for one replication.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::expfam::{clip_norm, draw_response, ExpFamModel, ModelId, ModelSpec};
use crate::linalg::Matrix;

/// True model, parameter and sample size of a simulation cell.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ModelSpec<f64>,
    pub theta: Vec<f64>,
    pub n: usize,
    /// Shared model for families without a design.
    fixed: Option<ExpFamModel<f64>>,
}

/// The clean, clipped mean statistic of one simulated dataset and the model
/// bound to that dataset's public design.
#[derive(Debug, Clone)]
pub struct DrawnStatistic {
    pub model: ExpFamModel<f64>,
    pub s_bar: Vec<f64>,
}

impl Scenario {
    pub fn new(spec: ModelSpec<f64>, theta: Vec<f64>, n: usize) -> Result<Self> {
        let fixed = if spec.id.is_regression() { None } else { Some(spec.bind(None)?) };
        Ok(Self { spec, theta, n, fixed })
    }

    /// Simulates a dataset and reduces it to its clipped mean statistic.
    ///
    /// Gaussian records are streamed: the draw order and arithmetic match
    /// [`ExpFamModel::sample`] followed by clipping and averaging, so the
    /// result is bit-identical to the materialized path. Regression designs
    /// are drawn from a standard normal, responses from the unclipped
    /// covariates, and only then are covariates and counts clipped.
    pub fn draw<R: RngCore + ?Sized>(&self, rng: &mut R) -> Result<DrawnStatistic> {
        if let Some(model) = &self.fixed {
            let s2 = model.sigma0_sq();
            let s_bar = clipped_gaussian_mean(s2 * self.theta[0], s2.sqrt(), model.clip().b, self.n, rng);
            return Ok(DrawnStatistic {
                model: model.clone(),
                s_bar: vec![s_bar],
            });
        }
        let (n, d) = (self.n, self.spec.d);
        let data: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let mut design = Matrix::from_row_major(n, d, data);
        let mut ys = Vec::with_capacity(n);
        for row in design.row_iter() {
            let eta: f64 = row.iter().zip(&self.theta).map(|(a, b)| a * b).sum();
            ys.push(draw_response(self.spec.id, eta, rng));
        }
        let clip = self.spec.clip;
        let bx = clip.b_x.expect("regression bound");
        for i in 0..n {
            clip_norm(design.row_mut(i), bx);
        }
        if self.spec.id == ModelId::Poisson {
            let by = clip.b_y.expect("count cap");
            ys.iter_mut().for_each(|y| *y = y.max(0.0).min(by));
        }
        let mut s_bar = vec![0.0; d];
        for (row, y) in design.row_iter().zip(&ys) {
            for (acc, x) in s_bar.iter_mut().zip(row) {
                *acc += y * x;
            }
        }
        s_bar.iter_mut().for_each(|s| *s /= n as f64);
        Ok(DrawnStatistic {
            model: self.spec.bind(Some(design))?,
            s_bar,
        })
    }
}

/// Mean of `n` draws from `N(mean, sd²)` truncated to `[-b, b]`.
pub(crate) fn clipped_gaussian_mean<R: RngCore + ?Sized>(mean: f64, sd: f64, b: f64, n: usize, rng: &mut R) -> f64 {
    let mut acc = 0.0;
    for _ in 0..n {
        let z: f64 = StandardNormal.sample(rng);
        acc += (mean + sd * z).max(-b).min(b);
    }
    acc / n as f64
}
