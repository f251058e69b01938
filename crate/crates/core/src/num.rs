//! Scalar abstraction for the analytic parts of the model (runtime planning,
//! collision probabilities). Simulation state itself is integral.

use num_traits::{Float, FromPrimitive};

/// Floating point scalar used by the closed-form computations.
pub trait Scalar: Float + FromPrimitive + std::fmt::Debug + std::iter::Sum + 'static {
    /// Lossy conversion from an `f64` constant.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    /// Lossy conversion from an unsigned count.
    fn count(v: u64) -> Self {
        Self::from_u64(v).expect("representable count")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
