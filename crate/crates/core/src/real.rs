//! Scalar element type of tensors and tapes.
//!
//! Training and inference run in `f32`. The same code instantiated at `f64`
//! serves finite-difference gradient checks, whose resolution in `f32` is
//! limited by rounding of the perturbed outputs.

use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::{Float, NumAssign};

pub trait Real:
    Float + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Size of one element in bytes.
    const BYTES: usize;

    fn of(v: f64) -> Self;

    fn wide(self) -> f64;
}

impl Real for f32 {
    const BYTES: usize = 4;

    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn wide(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const BYTES: usize = 8;

    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn wide(self) -> f64 {
        self
    }
}
