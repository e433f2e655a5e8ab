//! Document-level neural machine translation at desk scale.
//!
//! The engine trains and runs two transformer variants on chunks of `k`
//! consecutive sentences: a standard baseline, and a long-short term masking
//! variant that maintains a *global* attention stream over the whole chunk and
//! a *local* stream confined to the current sentence by a block-diagonal
//! additive mask. Both streams share projection parameters; they are combined
//! by a concatenating affine layer at the top of each stack.
//!
//! Everything is built on a small dense-tensor library with reverse-mode
//! gradients ([`numerics`]), generic over the scalar type. The shipped
//! pipeline runs in `f64` (see the type aliases below); `f32` works for the
//! math but the gradient-check tolerances are calibrated for doubles.

pub mod attention;
pub(crate) mod bytes;
pub mod checkpoint;
pub mod data;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod training;

pub use error::{Error, Result};

/// Vocabulary index. Small vocabularies only; `u32` everywhere.
pub type TokenId = u32;

/// Double-precision tensor, the default for the whole pipeline.
pub type Tensor64 = numerics::Tensor<f64>;
/// Single-precision tensor.
pub type Tensor32 = numerics::Tensor<f32>;
/// Double-precision computation tape.
pub type Tape64 = numerics::Tape<f64>;
/// Double-precision model.
pub type Model64 = model::Model<f64>;
/// Double-precision mask matrix.
pub type MaskMatrix64 = masking::MaskMatrix<f64>;
