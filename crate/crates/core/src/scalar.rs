//! Floating-point scalar used by the analytic models and statistics.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// f32 or f64.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static {
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to scalar")
    }

    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize converts to scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
