//! Numeric traits shared by the crate.
//!
//! Model math is written against [`Scalar`] (any IEEE float), while the
//! ranking metrics only need [`MetricValue`], which exact rational types also
//! satisfy.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, Num, ToPrimitive};

/// Floating point element type for tensors and models: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used for constants.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Value type for ranking metrics. Needs only field arithmetic and an
/// integer embedding, so `Ratio<i64>` works as well as floats.
pub trait MetricValue: Num + Copy + PartialOrd + Debug {
    fn from_count(n: usize) -> Self;
}

impl MetricValue for f32 {
    fn from_count(n: usize) -> Self {
        n as f32
    }
}

impl MetricValue for f64 {
    fn from_count(n: usize) -> Self {
        n as f64
    }
}

impl MetricValue for num_rational::Ratio<i64> {
    fn from_count(n: usize) -> Self {
        num_rational::Ratio::from_integer(n as i64)
    }
}

impl MetricValue for num_rational::Ratio<i128> {
    fn from_count(n: usize) -> Self {
        num_rational::Ratio::from_integer(n as i128)
    }
}
