//! Scalar abstraction for the floating-point paths.
//!
//! The integer pipeline works on `i8`/`i32`/`i64` codes directly; everything
//! that touches real values (reference tensors, quantization of fp inputs,
//! metrics, the reference encoder) is written against [`Scalar`] so the same
//! code runs on `f32` (the pipeline type) and `f64` (used by oracles).

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossless widening for `f32`, identity for `f64`.
    fn as_f64(self) -> f64;

    /// Nearest representable value.
    fn of_f64(v: f64) -> Self;

    fn of_usize(v: usize) -> Self {
        Self::of_f64(v as f64)
    }
}

impl Scalar for f32 {
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn of_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn of_f64(v: f64) -> Self {
        v
    }
}
