//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Graph`] records every operation in creation order, so the registry is
//! already a topological order and `backward` is a single reverse sweep.
//! Parameters enter a graph as leaves; anything inserted as a constant (or
//! passed through [`Graph::detach`]) never receives a gradient.

mod graph;
mod tensor;

pub use graph::{DropoutStream, Graph, Mode, Var};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Floating-point element type. `f64` is used for gradient checks and
/// oracles, `f32` for training runs.
pub trait Real:
    Float + FromPrimitive + Debug + Display + Default + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
    /// Lossy conversion used by the checkpoint format.
    fn to_f32(self) -> f32;
    fn from_f32(x: f32) -> Self;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn to_f32(self) -> f32 {
        self
    }
    #[inline]
    fn from_f32(x: f32) -> Self {
        x
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
    #[inline]
    fn to_f32(self) -> f32 {
        self as f32
    }
    #[inline]
    fn from_f32(x: f32) -> Self {
        x as f64
    }
}
