//! Scalar abstraction: every numeric routine in this crate is generic over
//! `Scalar`, instantiated as `f32` (training) or `f64` (metrics, oracles).

use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rustfft::FftNum;

/// Floating-point scalar usable throughout the crate: f32 or f64.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + ScalarOperand
    + LinalgScalar
    + FftNum
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for lifting an `f64` constant into the working scalar type.
#[inline]
pub fn sc<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("constant representable in scalar type")
}
