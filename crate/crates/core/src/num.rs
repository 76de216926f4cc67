//! Scalar abstraction for the numeric core.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar the core math is generic over.
///
/// `f64` is the working type of the harness; `f32` exists to keep the math
/// honest about precision assumptions.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum<Self>
    + fmt::Debug
    + fmt::Display
    + fmt::LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into the generic scalar.
#[inline]
pub fn real<R: Real>(x: f64) -> R {
    R::from_f64(x).expect("finite f64 converts to any Real")
}

/// Converts a generic scalar to `f64` for reporting.
#[inline]
pub fn to_f64<R: Real>(x: R) -> f64 {
    x.to_f64().expect("Real converts to f64")
}
