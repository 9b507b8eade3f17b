//! Element types a [`Tensor`](crate::Tensor) may hold.
//!
//! Training runs in `f32`; gradient checking runs the same model in `f64`,
//! where central differences are accurate enough to be meaningful.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable in every scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    fn from_usize(n: usize) -> Self {
        <Self as Scalar>::from_f64(n as f64)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// Shorthand for `T::from_f64`, used where a literal constant is needed.
#[inline]
pub(crate) fn lit<T: Scalar>(v: f64) -> T {
    <T as Scalar>::from_f64(v)
}
