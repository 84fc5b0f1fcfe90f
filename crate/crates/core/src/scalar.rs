//! Floating-point scalar abstraction shared by every model in the crate.
//!
//! Training runs in `f32`; gradient checks run the same code in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar usable as tensor element: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Width tag written into checkpoints and hashes.
    const BITS: u32;

    /// Lossless for `f64`, rounding for `f32`.
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }

    /// Raw IEEE bits, widened to u64.
    fn bits(self) -> u64;
}

impl Scalar for f32 {
    const BITS: u32 = 32;
    fn bits(self) -> u64 {
        u64::from(self.to_bits())
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;
    fn bits(self) -> u64 {
        self.to_bits()
    }
}
