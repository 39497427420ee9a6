//! Floating-point abstraction for the numeric kernels.
//!
//! Filters, spectral estimates, feature extraction and both classifier
//! families are written against [`Scalar`] so the same code runs in `f32`
//! (wire format, CNN weights) and `f64` (analysis, gradient checking).

use num_traits::{Float, FromPrimitive, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossless-enough conversion from `f64` for constants and counts.
    fn from_f(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant representable")
    }

    /// Widening conversion to `f64` for reporting.
    fn to_f(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
}
