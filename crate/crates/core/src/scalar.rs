use std::fmt::{Debug, Display, LowerExp};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point type the numeric core is written against: f32 or f64.
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + LowerExp + Default + 'static
{
    /// Working tolerance for rank and degeneracy decisions.
    fn tol() -> Self;
}

impl Scalar for f32 {
    fn tol() -> Self {
        1e-5
    }
}

impl Scalar for f64 {
    fn tol() -> Self {
        1e-11
    }
}

#[inline]
pub fn c<T: Scalar>(x: f64) -> T {
    nalgebra::convert(x)
}

#[inline]
pub fn f<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}
