//! Minimal dense-tensor arithmetic with reverse-mode gradients.
//!
//! Tensors are row-major `Vec`s of a [`Scalar`] type; the [`Tape`] records
//! every primitive so a single [`Tape::backward`] pass fills analytic
//! gradients. Nothing here is fast — it is small, deterministic and exactly
//! testable, which is what a desk-scale training run needs.

mod tape;
mod tensor;

pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Additive mask value standing in for \u{2212}\u{221e}. Kept finite so mask
/// arithmetic never produces NaN; `exp` of any score shifted by it underflows
/// to exactly zero in both `f32` and `f64`.
pub const NEG_INF: f64 = -1e9;

/// Floating scalar the engine is generic over.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64_exact(v: f64) -> Self {
        Self::from_f64(v).expect("f64 convertible to scalar")
    }

    fn to_f64_exact(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    /// The masking constant (`-1e9`), exactly representable in `f32` and `f64`.
    fn neg_inf() -> Self {
        Self::from_f64_exact(NEG_INF)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
