use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar the numerical core is written against.
pub trait Scalar:
    Float
    + FromPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Significant decimal digits needed for an exact text round trip.
    const ROUND_TRIP_DIGITS: usize;

    /// Converts an `f64` constant. Panics only for values the type cannot hold,
    /// which never happens for the finite literals used in this crate.
    #[inline]
    fn cst(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Residual tolerance with a floor tied to machine precision, so `f32`
    /// solvers are not asked for accuracy they cannot deliver.
    #[inline]
    fn tol(requested: f64) -> Self {
        let floor = 64.0 * Self::epsilon().to_f64_lossy();
        Self::cst(requested.max(floor))
    }
}

impl Scalar for f32 {
    const ROUND_TRIP_DIGITS: usize = 9;
}

impl Scalar for f64 {
    const ROUND_TRIP_DIGITS: usize = 17;
}

pub(crate) fn norm2<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

pub(crate) fn to_f64_vec<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}
