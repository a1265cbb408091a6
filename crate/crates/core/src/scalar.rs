use std::fmt::Debug;

use num_traits::{FromPrimitive, Num, ToPrimitive};

/// Ordered field element usable by the estimator and the enumeration oracles.
///
/// Implemented for `f32`, `f64` and exact rationals. Conversions to `f64` are
/// only used for tolerance checks and reporting.
pub trait Scalar: Num + Clone + PartialOrd + FromPrimitive + ToPrimitive + Debug {
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    fn as_f64(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Allowed deviation of a probability vector's sum from one.
    fn normalization_tolerance() -> f64 {
        1e-12
    }
}

impl Scalar for f32 {
    fn normalization_tolerance() -> f64 {
        1e-5
    }
}
impl Scalar for f64 {}
impl Scalar for num_rational::BigRational {}
