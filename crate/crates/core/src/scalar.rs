//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point type the kernels are written against: `f32` or `f64`.
///
/// Tolerances quoted in tests assume `f64`; `f32` instantiations are
/// supported for throughput experiments but carry their own error floor.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Panics only for values the type cannot represent at all.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal not representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Tolerance for "sums to one" style checks over `n` terms.
    #[inline]
    fn sum_tolerance(n: usize) -> Self {
        let floor = Self::lit(1e-12);
        let scaled = Self::epsilon() * Self::lit(4.0 * (n.max(1) as f64));
        floor.max(scaled)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for [`Scalar::lit`].
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::lit(x)
}

/// Sum in ascending index order. Iterator `sum` already does this; the
/// helper exists so reductions read the same everywhere.
#[inline]
pub fn ordered_sum<T: Scalar>(values: impl IntoIterator<Item = T>) -> T {
    let mut acc = T::zero();
    for v in values {
        acc += v;
    }
    acc
}
