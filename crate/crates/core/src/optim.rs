//! Box-constrained quasi-Newton minimization.
//!
//! Projected BFGS: variables sitting on a bound with the gradient pushing
//! outward are frozen for the iteration, the inverse-Hessian approximation is
//! applied on the free block, and an Armijo backtracking search runs along the
//! projected path. Dimensions here are small, so the inverse Hessian is kept
//! dense.

use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct BoxOptions<T> {
    pub lower: T,
    pub upper: T,
    /// Stop once the infinity norm of the projected gradient is at most this.
    pub grad_tol: T,
    pub max_iter: usize,
}

#[derive(Debug, Clone)]
pub struct BoxMinimum<T> {
    pub x: Vec<T>,
    pub value: T,
    pub iterations: usize,
    pub proj_grad_norm: T,
    pub converged: bool,
    /// True when the line search could make no further progress.
    pub stalled: bool,
}

pub(crate) fn project<T: Scalar>(x: &mut [T], lower: T, upper: T) {
    for v in x.iter_mut() {
        *v = v.max(lower).min(upper);
    }
}

fn projected_gradient<T: Scalar>(x: &[T], g: &[T], lower: T, upper: T) -> Vec<T> {
    x.iter()
        .zip(g)
        .map(|(&xi, &gi)| {
            if (xi <= lower && gi > T::zero()) || (xi >= upper && gi < T::zero()) {
                T::zero()
            } else {
                gi
            }
        })
        .collect()
}

fn inf_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}

/// Minimizes `f` over `[lower, upper]^d` starting from `x0`.
///
/// `f` returns the objective and its gradient. Errors from `f` abort the
/// search and are passed through.
pub fn minimize_in_box<T, E, F>(mut f: F, x0: &[T], opts: &BoxOptions<T>) -> Result<BoxMinimum<T>, E>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<(T, Vec<T>), E>,
{
    let d = x0.len();
    let (lo, hi) = (opts.lower, opts.upper);
    let armijo = T::cst(1e-4);
    let half = T::cst(0.5);

    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let (mut fx, mut g) = f(&x)?;
    let mut h = Matrix::identity(d);
    let mut h_is_identity = true;
    let mut stalled = false;
    let mut iterations = 0;

    loop {
        let pg = projected_gradient(&x, &g, lo, hi);
        let pg_norm = inf_norm(&pg);
        if pg_norm <= opts.grad_tol {
            return Ok(BoxMinimum {
                x,
                value: fx,
                iterations,
                proj_grad_norm: pg_norm,
                converged: true,
                stalled: false,
            });
        }
        if iterations >= opts.max_iter || stalled {
            return Ok(BoxMinimum {
                x,
                value: fx,
                iterations,
                proj_grad_norm: pg_norm,
                converged: false,
                stalled,
            });
        }
        iterations += 1;

        let free: Vec<bool> = pg
            .iter()
            .zip(&g)
            .map(|(&p, &gi)| p != T::zero() || gi == T::zero())
            .collect();
        let mut accepted = None;
        for attempt in 0..2 {
            let mut p = vec![T::zero(); d];
            for i in 0..d {
                if !free[i] {
                    continue;
                }
                let mut s = T::zero();
                for j in 0..d {
                    if free[j] {
                        s += h[(i, j)] * g[j];
                    }
                }
                p[i] = -s;
            }
            let slope: T = p.iter().zip(&g).map(|(&a, &b)| a * b).sum();
            if !(slope < T::zero()) {
                h = Matrix::identity(d);
                h_is_identity = true;
                p = pg.iter().map(|&v| -v).collect();
            }
            // Keep the first steepest-descent trial inside a unit-sized move.
            let mut step = T::one();
            if h_is_identity {
                let pn = inf_norm(&p);
                if pn > T::one() {
                    step = T::one() / pn;
                }
            }
            for _ in 0..60 {
                let mut xn: Vec<T> = x.iter().zip(&p).map(|(&xi, &pi)| xi + step * pi).collect();
                project(&mut xn, lo, hi);
                let decrease: T = xn
                    .iter()
                    .zip(&x)
                    .zip(&g)
                    .map(|((&a, &b), &gi)| (a - b) * gi)
                    .sum();
                if xn == x {
                    break;
                }
                let (fn_, gn) = f(&xn)?;
                if fn_.is_finite() && fn_ <= fx + armijo * decrease && decrease < T::zero() {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
                step *= half;
            }
            if accepted.is_some() || h_is_identity || attempt == 1 {
                break;
            }
            h = Matrix::identity(d);
            h_is_identity = true;
        }

        let Some((xn, fn_, gn)) = accepted else {
            stalled = true;
            continue;
        };

        let s: Vec<T> = xn.iter().zip(&x).map(|(&a, &b)| a - b).collect();
        let y: Vec<T> = gn.iter().zip(&g).map(|(&a, &b)| a - b).collect();
        let sy: T = s.iter().zip(&y).map(|(&a, &b)| a * b).sum();
        let yy: T = y.iter().map(|&v| v * v).sum();
        let ss: T = s.iter().map(|&v| v * v).sum();
        if sy > T::cst(1e-12) * (ss * yy).sqrt() && sy > T::zero() {
            if h_is_identity {
                h = Matrix::identity(d).scale(sy / yy);
            }
            bfgs_update(&mut h, &s, &y, sy);
            h_is_identity = false;
        }
        let rel_change = (fx - fn_).abs() / fx.abs().max(T::min_positive_value());
        x = xn;
        fx = fn_;
        g = gn;
        if rel_change <= T::epsilon() && inf_norm(&s) <= T::epsilon() * T::cst(16.0) {
            stalled = true;
        }
    }
}

fn bfgs_update<T: Scalar>(h: &mut Matrix<T>, s: &[T], y: &[T], sy: T) {
    let d = s.len();
    let rho = T::one() / sy;
    let hy = h.mul_vec(y);
    let yhy: T = y.iter().zip(&hy).map(|(&a, &b)| a * b).sum();
    for i in 0..d {
        for j in 0..d {
            h[(i, j)] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
    h.symmetrize();
}
