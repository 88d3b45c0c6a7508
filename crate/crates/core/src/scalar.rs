//! Scalar abstraction shared by every numerical kernel.

use std::fmt::{Debug, Display, LowerExp};

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use rustfft::FftNum;

/// Floating point type the solver can run in.
///
/// Implemented for `f32` and `f64`. All tolerances quoted in the tests are
/// for `f64`; `f32` is useful for quick exploratory runs only.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + FftNum
    + Default
    + Display
    + LowerExp
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Never fails for the implemented types.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion to f64")
    }

    /// Largest coefficient magnitude tolerated before a run is declared blown up.
    fn blowup_threshold() -> Self {
        Self::lit(1e10)
    }
}

impl Real for f32 {}
impl Real for f64 {}
