//! Scalar abstraction over tensor element types.
//!
//! Every numeric routine in this crate is generic over [`Scalar`], so the
//! same kernels run in `f32` (the training default) and `f64` (used by the
//! finite-difference gradient checks, where 32-bit noise would drown the
//! signal). Concrete aliases such as [`crate::Tensor32`] live at the crate
//! root.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}
