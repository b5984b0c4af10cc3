//! Lorentz (hyperboloid) model primitives.
//!
//! Hyperbolic space of curvature `c > 0` is realized as the upper sheet of
//! the two-sheeted hyperboloid in Minkowski space:
//!
//! ```text
//! { x = (x0, x~) : <x,x>_L = -1/c,  x0 > 0 }
//! <x,y>_L = -x0*y0 + sum_i xi*yi
//! ```
//!
//! This module holds the exact scalar-path geometry: inner product, lift,
//! distance, exponential map at the origin, geodesic interpolation, and the
//! entailment-cone quantities (half-aperture, exterior angle, violation).
//! The tape-recorded, batched counterparts used for training live in
//! [`diff`]; the two paths are cross-checked in tests.
//!
//! All operations are pure functions of their inputs and safe to call from
//! any number of threads. No randomness enters this module.

pub mod diff;

use thiserror::Error;

use crate::{lit, Scalar};

/// Floor used by the differentiable distance: acosh argument >= 1 + this.
pub const EPS_ACOSH: f64 = 1e-12;
/// Scalar-path distances snap to exactly zero when the acosh argument is
/// within this of 1; float rounding of the inner product for coincident
/// points lands on either side of 1, and d(x,x) must be exactly 0.
pub const EPS_ACOSH_SNAP: f64 = 1e-12;
/// asin/acos arguments are clamped into [-1 + EPS_TRIG, 1 - EPS_TRIG].
pub const EPS_TRIG: f64 = 1e-7;
/// Floor for the squared factor under the exterior-angle square root.
pub const EPS_DENOM: f64 = 1e-12;
/// Below this, (c<x,y>_L)^2 - 1 is treated as a degenerate x == y pair.
pub const EPS_DEGENERATE: f64 = 1e-12;
/// sinh(z)/z switches to its series for |z| below this.
pub const SINHC_SERIES_THRESHOLD: f64 = 1e-4;
/// Geodesic interpolation falls back to linear + reprojection below this.
pub const EPS_GEODESIC: f64 = 1e-6;
/// Cone-width constant K in the half-aperture formula.
pub const DEFAULT_CONE_K: f64 = 0.1;
/// Curvature is clamped to stay at or above this after optimizer steps.
pub const CURVATURE_FLOOR: f64 = 1e-4;
/// Default curvature upper bound.
pub const DEFAULT_C_MAX: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum LorentzError {
    #[error("spatial dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("non-finite coordinate in input")]
    NonFinite,
    #[error("point is off the hyperboloid: |<x,x>_L + 1/c| = {defect:e}")]
    OffManifold { defect: f64 },
    #[error("curvature must satisfy 0 < c <= c_max, got {c}")]
    BadCurvature { c: f64 },
    #[error("point at the root has no cone: half-aperture needs |x~| > 0")]
    RootHasNoCone,
    #[error("exterior angle is undefined for coincident points")]
    DegeneratePair,
    #[error("interpolation parameter must lie in [0,1], got {t}")]
    BadInterpolant { t: f64 },
}

pub type LorentzResult<T> = Result<T, LorentzError>;

/// A point on the upper sheet: positive `time` plus the `space` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LorentzPoint<S: Scalar> {
    pub time: S,
    pub space: Vec<S>,
}

impl<S: Scalar> LorentzPoint<S> {
    pub fn new(time: S, space: Vec<S>) -> Self {
        Self { time, space }
    }

    pub fn dim(&self) -> usize {
        self.space.len()
    }

    /// Euclidean norm of the space part, the "radius" in hierarchy reports.
    pub fn space_norm(&self) -> S {
        self.space.iter().map(|v| *v * *v).sum::<S>().sqrt()
    }

    pub fn inner(&self, other: &Self) -> LorentzResult<S> {
        minkowski_dot(self.time, &self.space, other.time, &other.space)
    }

    /// |<x,x>_L + 1/c| — zero exactly on the hyperboloid for curvature `c`.
    pub fn manifold_defect(&self, c: &CurvatureParam<S>) -> S {
        let self_inner = minkowski_dot(self.time, &self.space, self.time, &self.space)
            .expect("same dimensions");
        (self_inner + S::one() / c.value()).abs()
    }

    pub fn is_finite(&self) -> bool {
        self.time.is_finite() && self.space.iter().all(|v| v.is_finite())
    }
}

/// Tangent vector at the hyperboloid origin; its time component is
/// identically zero, so only the space part is stored and the Lorentz norm
/// equals the Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector<S: Scalar> {
    pub space: Vec<S>,
}

impl<S: Scalar> TangentVector<S> {
    pub fn new(space: Vec<S>) -> Self {
        Self { space }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            space: vec![S::zero(); dim],
        }
    }

    pub fn norm(&self) -> S {
        self.space.iter().map(|v| *v * *v).sum::<S>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.space.iter().all(|v| v.is_finite())
    }
}

/// Learnable curvature with its clamp bound: `0 < c <= c_max` always.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvatureParam<S: Scalar> {
    c: S,
    c_max: S,
}

impl<S: Scalar> CurvatureParam<S> {
    pub fn new(c: S) -> LorentzResult<Self> {
        Self::with_max(c, lit(DEFAULT_C_MAX))
    }

    pub fn with_max(c: S, c_max: S) -> LorentzResult<Self> {
        if !(c > S::zero() && c <= c_max) || !c.is_finite() {
            return Err(LorentzError::BadCurvature {
                c: c.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(Self { c, c_max })
    }

    pub fn value(&self) -> S {
        self.c
    }

    pub fn max(&self) -> S {
        self.c_max
    }

    pub fn sqrt_c(&self) -> S {
        self.c.sqrt()
    }

    /// Clamp an updated raw value back into `(0, c_max]`, as applied after
    /// every optimizer step.
    pub fn clamp_raw(v: S, c_max: S) -> S {
        v.max(lit(CURVATURE_FLOOR)).min(c_max)
    }
}

impl<S: Scalar> Default for CurvatureParam<S> {
    fn default() -> Self {
        Self {
            c: S::one(),
            c_max: lit(DEFAULT_C_MAX),
        }
    }
}

/// Half-aperture, exterior angle, and cone violation for one ordered pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeCheck<S: Scalar> {
    pub half_aperture: S,
    pub exterior_angle: S,
    pub violation: S,
}

/// Lorentz inner product on raw (time, space) coordinates.
///
/// Defined for arbitrary coordinates, not only on-manifold points; it is the
/// bilinear form everything else is written in terms of.
pub fn minkowski_dot<S: Scalar>(xt: S, xs: &[S], yt: S, ys: &[S]) -> LorentzResult<S> {
    if xs.len() != ys.len() {
        return Err(LorentzError::DimensionMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    let spatial: S = xs.iter().zip(ys).map(|(a, b)| *a * *b).sum();
    Ok(spatial - xt * yt)
}

/// Solve the hyperboloid constraint for the time coordinate:
/// `time = sqrt(1/c + |space|^2)`.
pub fn lift_to_hyperboloid<S: Scalar>(
    space: &[S],
    c: &CurvatureParam<S>,
) -> LorentzResult<LorentzPoint<S>> {
    if !space.iter().all(|v| v.is_finite()) {
        return Err(LorentzError::NonFinite);
    }
    let norm_sq: S = space.iter().map(|v| *v * *v).sum();
    Ok(LorentzPoint::new(
        (S::one() / c.value() + norm_sq).sqrt(),
        space.to_vec(),
    ))
}

/// The hyperboloid origin `(sqrt(1/c), 0, ..., 0)` — the hierarchy root.
pub fn origin<S: Scalar>(dim: usize, c: &CurvatureParam<S>) -> LorentzPoint<S> {
    LorentzPoint::new((S::one() / c.value()).sqrt(), vec![S::zero(); dim])
}

/// Recompute the time coordinate from the space part, restoring the
/// manifold constraint exactly. Applied after optimizer updates and
/// interpolation to stop float drift from accumulating.
pub fn reproject<S: Scalar>(point: &LorentzPoint<S>, c: &CurvatureParam<S>) -> LorentzPoint<S> {
    let norm_sq: S = point.space.iter().map(|v| *v * *v).sum();
    LorentzPoint::new(
        (S::one() / c.value() + norm_sq).sqrt(),
        point.space.clone(),
    )
}

fn validate_on_manifold<S: Scalar>(
    p: &LorentzPoint<S>,
    c: &CurvatureParam<S>,
) -> LorentzResult<()> {
    let defect = p.manifold_defect(c);
    // The raw defect scales with x0^2 in float, so far-out points are held
    // to a proportional rather than absolute bar.
    let scale = S::one().max(p.time * p.time);
    if defect > S::manifold_tol() * scale {
        return Err(LorentzError::OffManifold {
            defect: defect.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(())
}

/// Geodesic distance `sqrt(1/c) * acosh(-c <x,y>_L)`.
///
/// Arguments within `EPS_ACOSH_SNAP` of 1 collapse to distance 0 so that
/// `d(x,x) == 0` holds exactly despite inner-product rounding; the training
/// path in [`diff`] floors at `1 + EPS_ACOSH` instead to keep the gradient
/// finite.
pub fn lorentz_distance<S: Scalar>(
    x: &LorentzPoint<S>,
    y: &LorentzPoint<S>,
    c: &CurvatureParam<S>,
) -> LorentzResult<S> {
    validate_on_manifold(x, c)?;
    validate_on_manifold(y, c)?;
    let inner = x.inner(y)?;
    let arg = -c.value() * inner;
    if arg < S::one() + lit(EPS_ACOSH_SNAP) {
        return Ok(S::zero());
    }
    Ok(arg.acosh() / c.sqrt_c())
}

/// `sinh(z)/z`, continuously extended through zero.
pub fn sinhc<S: Scalar>(z: S) -> S {
    if z.abs() < lit(SINHC_SERIES_THRESHOLD) {
        let z2 = z * z;
        S::one() + z2 / lit(6.0) + z2 * z2 / lit(120.0)
    } else {
        z.sinh() / z
    }
}

/// d/dz of [`sinhc`].
pub fn sinhc_prime<S: Scalar>(z: S) -> S {
    if z.abs() < lit(SINHC_SERIES_THRESHOLD) {
        let z2 = z * z;
        z / lit(3.0) + z * z2 / lit(30.0)
    } else {
        (z * z.cosh() - z.sinh()) / (z * z)
    }
}

/// Exponential map at the origin: the tangent vector `v` is carried onto
/// the manifold along the geodesic of arc length `|v|`.
pub fn exp_map_origin<S: Scalar>(
    v: &TangentVector<S>,
    c: &CurvatureParam<S>,
) -> LorentzResult<LorentzPoint<S>> {
    if !v.is_finite() {
        return Err(LorentzError::NonFinite);
    }
    let z = c.sqrt_c() * v.norm();
    let time = z.cosh() * (S::one() / c.value()).sqrt();
    // sinh(z)/(sqrt(c)|v|) = sinh(z)/z since z = sqrt(c)|v|.
    let scale = sinhc(z);
    let space = v.space.iter().map(|vi| *vi * scale).collect();
    Ok(LorentzPoint::new(time, space))
}

/// Constant-speed geodesic between two on-manifold points:
/// `gamma(t) = [sinh((1-t)w) x + sinh(tw) y] / sinh(w)` with
/// `w = acosh(-c<x,y>_L)`; nearly coincident endpoints fall back to linear
/// interpolation, and the output is reprojected.
pub fn geodesic_interpolate<S: Scalar>(
    x: &LorentzPoint<S>,
    y: &LorentzPoint<S>,
    t: S,
    c: &CurvatureParam<S>,
) -> LorentzResult<LorentzPoint<S>> {
    if !(t >= S::zero() && t <= S::one()) {
        return Err(LorentzError::BadInterpolant {
            t: t.to_f64().unwrap_or(f64::NAN),
        });
    }
    validate_on_manifold(x, c)?;
    validate_on_manifold(y, c)?;
    if t == S::zero() {
        return Ok(x.clone());
    }
    if t == S::one() {
        return Ok(y.clone());
    }
    let omega = (-c.value() * x.inner(y)?).max(S::one()).acosh();
    let (wx, wy) = if omega < lit(EPS_GEODESIC) {
        (S::one() - t, t)
    } else {
        let denom = omega.sinh();
        (
            ((S::one() - t) * omega).sinh() / denom,
            (t * omega).sinh() / denom,
        )
    };
    let space = x
        .space
        .iter()
        .zip(&y.space)
        .map(|(a, b)| wx * *a + wy * *b)
        .collect();
    Ok(reproject(
        &LorentzPoint::new(wx * x.time + wy * y.time, space),
        c,
    ))
}

/// Half-aperture of the entailment cone at `x`:
/// `asin(clamp(2K / (sqrt(c) |x~|)))`. Wide near the root, narrowing as the
/// apex moves outward. The root itself entails everything and is rejected.
pub fn half_aperture<S: Scalar>(
    x: &LorentzPoint<S>,
    c: &CurvatureParam<S>,
    cone_k: S,
) -> LorentzResult<S> {
    let norm = x.space_norm();
    if norm == S::zero() {
        return Err(LorentzError::RootHasNoCone);
    }
    let arg = (lit::<S>(2.0) * cone_k / (c.sqrt_c() * norm)).min(S::one() - lit(EPS_TRIG));
    Ok(arg.asin())
}

/// Exterior angle at `x` of the geodesic triangle (origin, x, y): pi minus
/// the interior angle, compared against the half-aperture for cone
/// membership.
pub fn exterior_angle<S: Scalar>(
    x: &LorentzPoint<S>,
    y: &LorentzPoint<S>,
    c: &CurvatureParam<S>,
) -> LorentzResult<S> {
    let x_norm = x.space_norm();
    if x_norm == S::zero() {
        return Err(LorentzError::RootHasNoCone);
    }
    let inner = x.inner(y)?;
    let cl = c.value() * inner;
    let denom_sq = cl * cl - S::one();
    if denom_sq < lit(EPS_DEGENERATE) {
        return Err(LorentzError::DegeneratePair);
    }
    let num = y.time + x.time * cl;
    let denom = x_norm * denom_sq.max(lit(EPS_DENOM)).sqrt();
    let ratio = (num / denom)
        .max(-S::one() + lit(EPS_TRIG))
        .min(S::one() - lit(EPS_TRIG));
    Ok(ratio.acos())
}

/// Evaluate the cone membership of `y` relative to the cone at `x`:
/// `violation = max(0, exterior_angle - half_aperture)`, zero exactly when
/// `y` lies inside or on the cone.
pub fn cone_check<S: Scalar>(
    x: &LorentzPoint<S>,
    y: &LorentzPoint<S>,
    c: &CurvatureParam<S>,
    cone_k: S,
) -> LorentzResult<ConeCheck<S>> {
    let half_aperture = half_aperture(x, c, cone_k)?;
    let exterior_angle = exterior_angle(x, y, c)?;
    Ok(ConeCheck {
        half_aperture,
        exterior_angle,
        violation: (exterior_angle - half_aperture).max(S::zero()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn c1() -> CurvatureParam<f64> {
        CurvatureParam::new(1.0).unwrap()
    }

    fn random_point(rng: &mut Rng, dim: usize, c: &CurvatureParam<f64>, scale: f64) -> LorentzPoint<f64> {
        let space: Vec<f64> = (0..dim).map(|_| rng.normal::<f64>() * scale).collect();
        lift_to_hyperboloid(&space, c).unwrap()
    }

    fn random_curvature(rng: &mut Rng) -> CurvatureParam<f64> {
        CurvatureParam::new(rng.uniform_in(0.1, 10.0)).unwrap()
    }

    #[test]
    fn inner_of_origin_is_minus_one() {
        let o = origin(2, &c1());
        assert_eq!(o.inner(&o).unwrap(), -1.0);
    }

    #[test]
    fn inner_matches_hand_value() {
        let x = LorentzPoint::new(1.0, vec![0.0, 0.0]);
        let y = LorentzPoint::new(1f64.cosh(), vec![1f64.sinh(), 0.0]);
        assert_relative_eq!(x.inner(&y).unwrap(), -1.5430806348152437, epsilon = 1e-12);
    }

    #[test]
    fn inner_symmetric_bitwise() {
        let mut rng = Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let xt = rng.normal::<f64>();
            let yt = rng.normal::<f64>();
            let xs: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let ys: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let a = minkowski_dot(xt, &xs, yt, &ys).unwrap();
            let b = minkowski_dot(yt, &ys, xt, &xs).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn inner_dimension_mismatch_errors() {
        let err = minkowski_dot(1.0, &[0.0, 0.0], 1.0, &[0.0]).unwrap_err();
        assert_eq!(err, LorentzError::DimensionMismatch { left: 2, right: 1 });
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn inner_bilinear(
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            x in prop::collection::vec(-2.0f64..2.0, 4),
            z in prop::collection::vec(-2.0f64..2.0, 4),
            y in prop::collection::vec(-2.0f64..2.0, 4),
        ) {
            // Raw coordinate tuples: (time, space) = (v[0], v[1..]).
            let comb_t = a * x[0] + b * z[0];
            let comb_s: Vec<f64> = (1..4).map(|i| a * x[i] + b * z[i]).collect();
            let lhs = minkowski_dot(comb_t, &comb_s, y[0], &y[1..]).unwrap();
            let rhs = a * minkowski_dot(x[0], &x[1..], y[0], &y[1..]).unwrap()
                + b * minkowski_dot(z[0], &z[1..], y[0], &y[1..]).unwrap();
            let scale = 1f64.max(lhs.abs()).max(rhs.abs());
            prop_assert!((lhs - rhs).abs() / scale <= 1e-10);
        }
    }

    #[test]
    fn lift_origin_and_hand_value() {
        let p = lift_to_hyperboloid(&[0.0, 0.0], &c1()).unwrap();
        assert_eq!(p.time, 1.0);
        let q = lift_to_hyperboloid(&[1f64.sinh(), 0.0], &c1()).unwrap();
        assert_relative_eq!(q.time, 1f64.cosh(), epsilon = 1e-15);
    }

    #[test]
    fn lift_satisfies_constraint() {
        let mut rng = Rng::seed_from_u64(12);
        for _ in 0..200 {
            let c = random_curvature(&mut rng);
            let p = random_point(&mut rng, 6, &c, 2.0);
            assert!(
                (p.inner(&p).unwrap() + 1.0 / c.value()).abs() <= 1e-12,
                "constraint violated"
            );
        }
    }

    #[test]
    fn lift_rejects_non_finite() {
        assert_eq!(
            lift_to_hyperboloid(&[f64::NAN], &c1()).unwrap_err(),
            LorentzError::NonFinite
        );
    }

    #[test]
    fn distance_to_self_is_zero() {
        let mut rng = Rng::seed_from_u64(13);
        for _ in 0..100 {
            let c = random_curvature(&mut rng);
            let p = random_point(&mut rng, 4, &c, 2.0);
            assert_eq!(lorentz_distance(&p, &p, &c).unwrap(), 0.0);
        }
    }

    #[test]
    fn distance_unit_radial_arc() {
        let c = c1();
        let o = origin(2, &c);
        let y = lift_to_hyperboloid(&[1f64.sinh(), 0.0], &c).unwrap();
        assert_relative_eq!(lorentz_distance(&o, &y, &c).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn distance_triangle_inequality_sweep() {
        let mut rng = Rng::seed_from_u64(14);
        for _ in 0..1000 {
            let c = random_curvature(&mut rng);
            let x = random_point(&mut rng, 3, &c, 1.5);
            let y = random_point(&mut rng, 3, &c, 1.5);
            let z = random_point(&mut rng, 3, &c, 1.5);
            let dxz = lorentz_distance(&x, &z, &c).unwrap();
            let dxy = lorentz_distance(&x, &y, &c).unwrap();
            let dyz = lorentz_distance(&y, &z, &c).unwrap();
            assert!(dxz <= dxy + dyz + 1e-9, "triangle violated: {dxz} > {dxy} + {dyz}");
        }
    }

    #[test]
    fn distance_rejects_off_manifold() {
        let bad = LorentzPoint::new(5.0, vec![0.1, 0.1]);
        let o = origin(2, &c1());
        assert!(matches!(
            lorentz_distance(&bad, &o, &c1()).unwrap_err(),
            LorentzError::OffManifold { .. }
        ));
    }

    #[test]
    fn exp_map_zero_is_origin_exactly() {
        let c = c1();
        let p = exp_map_origin(&TangentVector::zeros(3), &c).unwrap();
        assert_eq!(p.time, 1.0);
        assert!(p.space.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn exp_map_hand_value() {
        let p = exp_map_origin(&TangentVector::new(vec![1.0, 0.0]), &c1()).unwrap();
        assert_relative_eq!(p.time, 1.5430806348152437, epsilon = 1e-12);
        assert_relative_eq!(p.space[0], 1.1752011936438014, epsilon = 1e-12);
        assert_eq!(p.space[1], 0.0);
    }

    #[test]
    fn exp_map_arc_length_matches_tangent_norm() {
        let mut rng = Rng::seed_from_u64(15);
        for _ in 0..300 {
            let c = random_curvature(&mut rng);
            let v = TangentVector::new((0..4).map(|_| rng.normal::<f64>()).collect());
            let p = exp_map_origin(&v, &c).unwrap();
            let d = lorentz_distance(&origin(4, &c), &p, &c).unwrap();
            let n = v.norm();
            assert!((d - n).abs() <= 1e-9 * n.max(1.0), "arc {d} vs |v| {n}");
        }
    }

    #[test]
    fn geodesic_endpoints_exact() {
        let mut rng = Rng::seed_from_u64(16);
        let c = c1();
        let x = random_point(&mut rng, 3, &c, 1.0);
        let y = random_point(&mut rng, 3, &c, 1.0);
        assert_eq!(geodesic_interpolate(&x, &y, 0.0, &c).unwrap(), x);
        assert_eq!(geodesic_interpolate(&x, &y, 1.0, &c).unwrap(), y);
    }

    #[test]
    fn geodesic_midpoint_of_radial_arc() {
        let c = c1();
        let x = origin(2, &c);
        let y = lift_to_hyperboloid(&[2f64.sinh(), 0.0], &c).unwrap();
        let mid = geodesic_interpolate(&x, &y, 0.5, &c).unwrap();
        assert_relative_eq!(mid.space[0], 1f64.sinh(), epsilon = 1e-10);
        assert_relative_eq!(mid.time, 1f64.cosh(), epsilon = 1e-10);
    }

    #[test]
    fn geodesic_sweep_on_manifold_and_additive() {
        let mut rng = Rng::seed_from_u64(17);
        for _ in 0..100 {
            let c = random_curvature(&mut rng);
            let x = random_point(&mut rng, 3, &c, 1.5);
            let y = random_point(&mut rng, 3, &c, 1.5);
            let d = lorentz_distance(&x, &y, &c).unwrap();
            for k in 0..=50 {
                let t = k as f64 / 50.0;
                let g = geodesic_interpolate(&x, &y, t, &c).unwrap();
                assert!(g.manifold_defect(&c) <= 1e-9);
                let left = lorentz_distance(&x, &g, &c).unwrap();
                let right = lorentz_distance(&g, &y, &c).unwrap();
                assert!((left + right - d).abs() <= 1e-8, "additivity off at t={t}");
                assert!((left - t * d).abs() <= 1e-8, "arc fraction off at t={t}");
            }
        }
    }

    #[test]
    fn geodesic_handles_coincident_endpoints() {
        let c = c1();
        let x = lift_to_hyperboloid(&[0.3, -0.2], &c).unwrap();
        let g = geodesic_interpolate(&x, &x, 0.37, &c).unwrap();
        assert!(g.manifold_defect(&c) <= 1e-12);
        assert_relative_eq!(g.space[0], 0.3, epsilon = 1e-12);
    }

    #[test]
    fn geodesic_rejects_bad_t() {
        let c = c1();
        let x = origin(2, &c);
        assert!(matches!(
            geodesic_interpolate(&x, &x, 1.5, &c).unwrap_err(),
            LorentzError::BadInterpolant { .. }
        ));
    }

    #[test]
    fn half_aperture_hand_values() {
        let c = c1();
        // |x~| = 0.4, K = 0.1: asin(0.5) = pi/6.
        let x = lift_to_hyperboloid(&[0.4, 0.0], &c).unwrap();
        assert_relative_eq!(
            half_aperture(&x, &c, 0.1).unwrap(),
            std::f64::consts::FRAC_PI_6,
            epsilon = 1e-12
        );
        // |x~| = 0.2 puts the raw argument at exactly 1; the clamp engages.
        let near_root = lift_to_hyperboloid(&[0.2, 0.0], &c).unwrap();
        assert_relative_eq!(
            half_aperture(&near_root, &c, 0.1).unwrap(),
            (1.0 - EPS_TRIG).asin(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn half_aperture_decreases_with_radius() {
        let c = c1();
        let mut last = std::f64::consts::FRAC_PI_2;
        for k in 1..40 {
            let r = 0.25 + 0.25 * k as f64;
            let x = lift_to_hyperboloid(&[r, 0.0], &c).unwrap();
            let a = half_aperture(&x, &c, 0.1).unwrap();
            assert!(a < last, "aperture not decreasing at |x~| = {r}");
            last = a;
        }
    }

    #[test]
    fn half_aperture_rejects_root() {
        let c = c1();
        assert_eq!(
            half_aperture(&origin(2, &c), &c, 0.1).unwrap_err(),
            LorentzError::RootHasNoCone
        );
    }

    #[test]
    fn exterior_angle_radial_cases() {
        let c = c1();
        let x = lift_to_hyperboloid(&[0.7, 0.0], &c).unwrap();
        let beyond = lift_to_hyperboloid(&[1.9, 0.0], &c).unwrap();
        let between = lift_to_hyperboloid(&[0.2, 0.0], &c).unwrap();
        // Clamping the acos argument to 1 - EPS_TRIG bounds how close to the
        // exact 0 / pi limits the implementation can get.
        assert!(exterior_angle(&x, &beyond, &c).unwrap() < 1e-3);
        assert!(exterior_angle(&x, &between, &c).unwrap() > std::f64::consts::PI - 1e-3);
    }

    #[test]
    fn exterior_angle_rejects_coincident() {
        let c = c1();
        let x = lift_to_hyperboloid(&[0.5, 0.1], &c).unwrap();
        assert_eq!(
            exterior_angle(&x, &x, &c).unwrap_err(),
            LorentzError::DegeneratePair
        );
    }

    /// Independent oracle: the angle at x between the geodesics toward the
    /// origin and toward y, via general-basepoint log maps. Exterior angle
    /// is pi minus that interior angle.
    mod log_map_oracle {
        use super::*;

        fn log_map(
            base: &LorentzPoint<f64>,
            target: &LorentzPoint<f64>,
            c: &CurvatureParam<f64>,
        ) -> (f64, Vec<f64>) {
            let inner = base.inner(target).unwrap();
            // Project target onto the tangent space at base.
            let coef = c.value() * inner;
            let vt = target.time + coef * base.time;
            let vs: Vec<f64> = target
                .space
                .iter()
                .zip(&base.space)
                .map(|(t, b)| t + coef * b)
                .collect();
            let norm_l = (minkowski_dot(vt, &vs, vt, &vs).unwrap()).max(0.0).sqrt();
            let d = lorentz_distance(base, target, c).unwrap();
            let scale = d / norm_l;
            (vt * scale, vs.iter().map(|v| v * scale).collect())
        }

        fn interior_angle_cos(
            x: &LorentzPoint<f64>,
            a: &LorentzPoint<f64>,
            b: &LorentzPoint<f64>,
            c: &CurvatureParam<f64>,
        ) -> f64 {
            let (ut, us) = log_map(x, a, c);
            let (vt, vs) = log_map(x, b, c);
            let uv = minkowski_dot(ut, &us, vt, &vs).unwrap();
            let uu = minkowski_dot(ut, &us, ut, &us).unwrap();
            let vv = minkowski_dot(vt, &vs, vt, &vs).unwrap();
            uv / (uu.sqrt() * vv.sqrt())
        }

        #[test]
        fn exterior_angle_matches_oracle() {
            let mut rng = Rng::seed_from_u64(18);
            let mut checked = 0;
            while checked < 300 {
                let c = random_curvature(&mut rng);
                let x = random_point(&mut rng, 3, &c, 1.0);
                let y = random_point(&mut rng, 3, &c, 1.0);
                if x.space_norm() < 0.05 || lorentz_distance(&x, &y, &c).unwrap() < 1e-2 {
                    continue;
                }
                let cos_int = interior_angle_cos(&x, &origin(3, &c), &y, &c);
                // Near-colinear pairs hit the acos clamp; the oracle is only
                // meaningful away from it.
                if cos_int.abs() > 0.999 {
                    continue;
                }
                let oracle = std::f64::consts::PI - cos_int.acos();
                let got = exterior_angle(&x, &y, &c).unwrap();
                assert!(
                    (got - oracle).abs() <= 1e-6,
                    "exterior {got} vs oracle {oracle}"
                );
                checked += 1;
            }
        }
    }

    #[test]
    fn cone_check_radial_pair_inside() {
        let c = c1();
        let x = lift_to_hyperboloid(&[0.4, 0.0], &c).unwrap();
        let y = lift_to_hyperboloid(&[1.4, 0.0], &c).unwrap();
        let check = cone_check(&x, &y, &c, 0.1).unwrap();
        assert_eq!(check.violation, 0.0);
    }

    #[test]
    fn cone_check_orthogonal_pair_violates() {
        let c = c1();
        let x = lift_to_hyperboloid(&[0.4, 0.0], &c).unwrap();
        let y = lift_to_hyperboloid(&[0.0, 0.4], &c).unwrap();
        let check = cone_check(&x, &y, &c, 0.1).unwrap();
        assert!(check.violation > 0.0);
        assert_relative_eq!(
            check.violation,
            check.exterior_angle - std::f64::consts::FRAC_PI_6,
            epsilon = 1e-12
        );
    }

    #[test]
    fn cone_violation_never_negative() {
        let mut rng = Rng::seed_from_u64(19);
        let mut done = 0;
        while done < 10_000 {
            let c = random_curvature(&mut rng);
            let x = random_point(&mut rng, 3, &c, 1.0);
            let y = random_point(&mut rng, 3, &c, 1.0);
            if x.space_norm() < 1e-6 {
                continue;
            }
            match cone_check(&x, &y, &c, 0.1) {
                Ok(check) => {
                    assert!(check.violation >= 0.0);
                    done += 1;
                }
                Err(LorentzError::DegeneratePair) => continue,
                Err(e) => panic!("unexpected error {e}"),
            }
        }
    }

    #[test]
    fn cone_transitive_along_radial_chains() {
        let mut rng = Rng::seed_from_u64(20);
        for _ in 0..200 {
            let c = random_curvature(&mut rng);
            let a = rng.uniform_in(0.2, 2.0);
            let b = a + rng.uniform_in(0.1, 2.0);
            let d = b + rng.uniform_in(0.1, 2.0);
            let dir: Vec<f64> = {
                let raw: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
                let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
                raw.iter().map(|v| v / n).collect()
            };
            let mk = |r: f64| {
                lift_to_hyperboloid(&dir.iter().map(|v| v * r).collect::<Vec<_>>(), &c).unwrap()
            };
            let (x, y, z) = (mk(a), mk(b), mk(d));
            assert_eq!(cone_check(&x, &y, &c, 0.1).unwrap().violation, 0.0);
            assert_eq!(cone_check(&y, &z, &c, 0.1).unwrap().violation, 0.0);
            assert_eq!(cone_check(&x, &z, &c, 0.1).unwrap().violation, 0.0);
        }
    }
}
