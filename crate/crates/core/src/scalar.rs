//! Scalar abstraction for the numeric stack.
//!
//! Everything that does arithmetic is generic over [`Real`] so the same code
//! can run in `f32` (the artifact precision used for training and on-disk
//! tensors) and in `f64` (used by the finite-difference gradient oracle).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable by tensors, layers, and losses.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Copy + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; used for constants and RNG draws, which
    /// are always produced in `f64` so that every instantiation sees the same
    /// stream.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Real")
    }

    /// Conversion to `f64` for reporting, metrics, and serialization.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for `Real::from_f64_lossy`, handy in long arithmetic chains.
pub fn real<S: Real>(v: f64) -> S {
    S::from_f64_lossy(v)
}
