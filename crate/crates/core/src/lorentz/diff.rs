//! Tape-recorded, batched counterparts of the scalar Lorentz operations.
//!
//! The losses train through these: every formula is composed from tensor
//! primitives whose analytic backwards live on the [`Tape`], so gradients
//! flow to encoder outputs and to the learnable curvature. Values agree
//! with the scalar path in [`super`] (cross-checked in tests) with one
//! deliberate exception: the acosh argument of the distance is floored at
//! `1 + EPS_ACOSH` rather than exactly 1, which keeps its gradient finite
//! when a pair of embeddings collapses onto each other.

use super::{EPS_ACOSH, EPS_DENOM, EPS_TRIG};
use crate::tensor::{RawTensor, Tensor, TensorResult};
use crate::{lit, Scalar};

/// Space norms below this count as "at the root" and are clamped; callers
/// surface the event through a warning counter.
pub const EPS_ROOT: f64 = 1e-8;

/// A batch of hyperbolic points on a tape: `time` is `[B,1]`, `space` is
/// `[B,n]`, all on the sheet defined by the curvature tensor they were
/// built with.
#[derive(Clone)]
pub struct PointsOnTape<S: Scalar> {
    pub time: Tensor<S>,
    pub space: Tensor<S>,
}

impl<S: Scalar> PointsOnTape<S> {
    pub fn batch(&self) -> usize {
        self.time.dims2().0
    }
}

/// Lift rows of space coordinates onto the hyperboloid:
/// `time_i = sqrt(1/c + |space_i|^2)`.
pub fn lift_rows<S: Scalar>(space: &Tensor<S>, c: &Tensor<S>) -> TensorResult<PointsOnTape<S>> {
    let norm_sq = space.mul(space)?.sum_rows();
    let c_inv = c.clamp(Some(lit(super::CURVATURE_FLOOR)), None);
    let time = norm_sq
        .add(&one_like(&norm_sq).div(&c_inv)?)?
        .sqrt();
    Ok(PointsOnTape {
        time,
        space: space.clone(),
    })
}

/// Exponential map at the origin, one tangent row at a time:
/// `time = cosh(z)/sqrt(c)`, `space = sinhc(z) * v` with `z = sqrt(c)|v|`.
pub fn exp_map_rows<S: Scalar>(v: &Tensor<S>, c: &Tensor<S>) -> TensorResult<PointsOnTape<S>> {
    let sqrt_c = c.clamp(Some(lit(super::CURVATURE_FLOOR)), None).sqrt();
    let z = v.row_norm(lit(EPS_ROOT)).mul(&sqrt_c)?;
    let time = z.cosh().div(&sqrt_c)?;
    let space = v.mul(&z.sinhc())?;
    Ok(PointsOnTape { time, space })
}

/// Pairwise Lorentz inner products: `out[i,j] = <x_i, y_j>_L`, shape `[B,B]`.
pub fn inner_pairwise<S: Scalar>(
    x: &PointsOnTape<S>,
    y: &PointsOnTape<S>,
) -> TensorResult<Tensor<S>> {
    x.space
        .matmul_t(&y.space)?
        .sub(&x.time.matmul_t(&y.time)?)
}

/// Row-aligned Lorentz inner products: `out[i] = <x_i, y_i>_L`, shape `[B,1]`.
pub fn inner_diag<S: Scalar>(x: &PointsOnTape<S>, y: &PointsOnTape<S>) -> TensorResult<Tensor<S>> {
    x.space
        .mul(&y.space)?
        .sum_rows()
        .sub(&x.time.mul(&y.time)?)
}

fn distance_from_inner<S: Scalar>(inner: &Tensor<S>, c: &Tensor<S>) -> TensorResult<Tensor<S>> {
    let sqrt_c = c.clamp(Some(lit(super::CURVATURE_FLOOR)), None).sqrt();
    let arg = inner
        .mul(c)?
        .neg()
        .clamp(Some(S::one() + lit(EPS_ACOSH)), None);
    arg.acosh().div(&sqrt_c)
}

/// All-pairs geodesic distances `[B,B]`; `out[i,j] = d_L(x_i, y_j)`.
pub fn distance_matrix<S: Scalar>(
    x: &PointsOnTape<S>,
    y: &PointsOnTape<S>,
    c: &Tensor<S>,
) -> TensorResult<Tensor<S>> {
    distance_from_inner(&inner_pairwise(x, y)?, c)
}

/// Row-aligned geodesic distances `[B,1]`.
pub fn distance_diag<S: Scalar>(
    x: &PointsOnTape<S>,
    y: &PointsOnTape<S>,
    c: &Tensor<S>,
) -> TensorResult<Tensor<S>> {
    distance_from_inner(&inner_diag(x, y)?, c)
}

/// Half-aperture of each row's entailment cone, `[B,1]`, plus how many rows
/// sat at the root and had their aperture clamped to `asin(1 - EPS_TRIG)`.
pub fn half_aperture_rows<S: Scalar>(
    x: &PointsOnTape<S>,
    c: &Tensor<S>,
    cone_k: S,
) -> TensorResult<(Tensor<S>, usize)> {
    let sqrt_c = c.clamp(Some(lit(super::CURVATURE_FLOOR)), None).sqrt();
    let norm = x.space.row_norm(lit(EPS_ROOT));
    let clamped_roots = norm
        .value()
        .data()
        .iter()
        .filter(|v| **v < lit(EPS_ROOT))
        .count();
    let denom = norm.mul(&sqrt_c)?.clamp(Some(lit(EPS_ROOT)), None);
    let numer = full_like(&denom, lit::<S>(2.0) * cone_k);
    let arg = numer
        .div(&denom)?
        .clamp(Some(-S::one() + lit(EPS_TRIG)), Some(S::one() - lit(EPS_TRIG)));
    Ok((arg.asin(), clamped_roots))
}

/// Exterior angle for each row-aligned pair, `[B,1]`.
pub fn exterior_angle_diag<S: Scalar>(
    x: &PointsOnTape<S>,
    y: &PointsOnTape<S>,
    c: &Tensor<S>,
) -> TensorResult<Tensor<S>> {
    let inner = inner_diag(x, y)?;
    let cl = inner.mul(c)?;
    let num = y.time.add(&x.time.mul(&cl)?)?;
    let under = cl
        .mul(&cl)?
        .add_const(-S::one())
        .clamp(Some(lit(EPS_DENOM)), None)
        .sqrt();
    let x_norm = x
        .space
        .row_norm(lit(EPS_ROOT))
        .clamp(Some(lit(EPS_ROOT)), None);
    let ratio = num
        .div(&x_norm.mul(&under)?)?
        .clamp(Some(-S::one() + lit(EPS_TRIG)), Some(S::one() - lit(EPS_TRIG)));
    Ok(ratio.acos())
}

/// Per-pair cone violations `max(0, exterior - aperture)`, `[B,1]`, with the
/// count of root-clamped apex rows.
pub fn cone_violation_diag<S: Scalar>(
    x: &PointsOnTape<S>,
    y: &PointsOnTape<S>,
    c: &Tensor<S>,
    cone_k: S,
) -> TensorResult<(Tensor<S>, usize)> {
    let (aperture, clamped_roots) = half_aperture_rows(x, c, cone_k)?;
    let exterior = exterior_angle_diag(x, y, c)?;
    Ok((exterior.sub(&aperture)?.relu(), clamped_roots))
}

fn one_like<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    full_like(t, S::one())
}

fn full_like<S: Scalar>(t: &Tensor<S>, v: S) -> Tensor<S> {
    let shape = t.shape();
    let numel: usize = shape.iter().product();
    t.tape()
        .constant(RawTensor::new(&shape, vec![v; numel]).expect("shape matches"))
}
