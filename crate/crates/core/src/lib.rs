//! Hyperbolic masked image distillation at desk scale.
//!
//! A dual-encoder vision-language model trained entirely in the Lorentz
//! (hyperboloid) model of hyperbolic space: masked patch inputs feed a
//! student tower, a frozen wider teacher sees full images, and the two are
//! tied together by a temperature-scaled contrastive loss on negative
//! Lorentz distance, a feature-interaction distillation loss that crosses
//! student and teacher modalities, and an entailment-cone loss that carves
//! a visual-semantic hierarchy into the embedding radii.
//!
//! Everything is built on two foundations:
//!
//! - [`lorentz`] — exact, differentiable hyperboloid primitives (inner
//!   product, lift, distance, exponential map, geodesics, entailment cones),
//! - [`tensor`] — a minimal reverse-mode autodiff engine over dense
//!   row-major buffers, just enough to express the toy transformer towers
//!   and every loss.
//!
//! All numeric code is generic over [`Scalar`] (`f32` for training, `f64`
//! for verification); concrete aliases live at the crate root.

pub mod datasynth;
pub mod encoders;
pub mod eval;
pub mod gradcheck;
pub mod lorentz;
pub mod losses;
pub mod masking;
pub mod rng;
pub mod tensor;
pub mod trainer;

use std::fmt::{Debug, Display};

/// Floating-point scalar the whole stack is generic over: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssignOps
    + std::iter::Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Tolerance for the on-manifold invariant |<x,x>_L + 1/c|.
    fn manifold_tol() -> Self;
}

impl Scalar for f32 {
    fn manifold_tol() -> Self {
        1e-3
    }
}

impl Scalar for f64 {
    fn manifold_tol() -> Self {
        1e-8
    }
}

/// Shorthand for pulling an `f64` literal into the generic scalar type.
#[inline]
pub fn lit<S: Scalar>(v: f64) -> S {
    S::from_f64(v).expect("literal representable in scalar type")
}

pub type LorentzPoint32 = lorentz::LorentzPoint<f32>;
pub type LorentzPoint64 = lorentz::LorentzPoint<f64>;
pub type TangentVector32 = lorentz::TangentVector<f32>;
pub type TangentVector64 = lorentz::TangentVector<f64>;
pub type RawTensor32 = tensor::RawTensor<f32>;
pub type RawTensor64 = tensor::RawTensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = encoders::Model<f32>;
pub type Model64 = encoders::Model<f64>;
