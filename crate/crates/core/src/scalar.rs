//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type for latents, parameters and gradients: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal. Infallible for the two implementors.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    /// Converts from `f32` storage (checkpoints, binary records).
    #[inline]
    fn from_f32_storage(x: f32) -> Self {
        Self::from_f32(x).expect("f32 representable")
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self.to_f32().expect("f32 conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}
