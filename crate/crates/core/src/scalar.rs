use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type for tensors and model math.
///
/// Everything numeric in this crate is generic over `Scalar` so that the same
/// code can train in `f32` and be gradient-checked in `f64`. The trait adds
/// the handful of things `num_traits::Float` lacks: an exact error function
/// (needed by the activation used in the feed-forward blocks) and cheap
/// conversions to and from `f64` for accumulation and reporting.
pub trait Scalar:
    num_traits::Float + Sum + Debug + Display + Copy + Send + Sync + 'static
{
    /// Exact error function, accurate to within a few ulps.
    fn erf(self) -> Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}
