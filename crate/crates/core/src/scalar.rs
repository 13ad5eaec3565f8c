//! Floating point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar usable by the controller: `f32` or `f64`.
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Display + Debug + Send + Sync + 'static
{
    /// Converts an `f64` literal into the scalar type.
    #[inline]
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("literal representable in scalar type")
    }

    /// Lossy conversion used for reporting and file output.
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Value treated as an infinite bound by the QP layer.
    #[inline]
    fn infinity_bound() -> Self {
        Self::lit(1e30)
    }

    #[inline]
    fn is_finite_value(self) -> bool {
        self.to_f64().map(f64::is_finite).unwrap_or(false)
    }
}

impl Scalar for f32 {
    #[inline]
    fn infinity_bound() -> Self {
        1e30
    }
}

impl Scalar for f64 {}
