//! Scalar abstraction for the numeric core.
//!
//! The model runs in `f32` for speed; gradient checking instantiates the
//! same code in `f64` so finite differences are not drowned by rounding.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssignOps};

/// Floating-point scalar usable throughout the forward/backward passes.
pub trait Real: Float + NumAssignOps + Sum + Debug + Display + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Real for f32 {
    fn from_f64(x: f64) -> f32 {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn from_f32(x: f32) -> f32 {
        x
    }

    fn to_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> f64 {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn from_f32(x: f32) -> f64 {
        x as f64
    }

    fn to_f32(self) -> f32 {
        self as f32
    }
}
