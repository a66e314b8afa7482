//! Scalar abstraction: the numeric core is generic over the float type.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar usable throughout the numeric core.
///
/// Implemented for `f32` and `f64`; the aliases at the crate root fix `f64`,
/// which is what the trainer, the CLI, and the on-disk formats use.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ScalarOperand + Sum + Debug + Display + Default + 'static
{
    /// Lossy conversion from `f64`, for literals and tolerances.
    fn of(x: f64) -> Self;

    /// Widening conversion to `f64`, for reporting and logging.
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}
