//! SO(3) toolbox: exponential/logarithm maps, composition and SLERP.
//!
//! Rotations are stored as orthonormal 3×3 matrices with the column-vector
//! convention `p_w = R_wb · p_b`. Tangent vectors are axis-angle 3-vectors in
//! radians; perturbations are applied on the right, `R ← R · Exp(δ)`.
//!
//! The free functions [`exp`], [`log`], [`hat`] and [`vee`] are generic over
//! [`Real`] so the same code differentiates through jets.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::jet::Real;

/// Tolerance for accepting a user-supplied matrix as a rotation.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

const SMALL_ANGLE_SQ: f64 = 1e-16;

#[cfg(any(test, feature = "op-count"))]
pub mod op_count {
    //! Per-thread counters of Exp/Log evaluations, for structural cost checks.
    use std::cell::Cell;

    thread_local! {
        pub(crate) static EXP: Cell<usize> = const { Cell::new(0) };
        pub(crate) static LOG: Cell<usize> = const { Cell::new(0) };
    }

    pub fn reset() {
        EXP.with(|c| c.set(0));
        LOG.with(|c| c.set(0));
    }

    /// `(exp_calls, log_calls)` since the last reset on this thread.
    pub fn get() -> (usize, usize) {
        (EXP.with(|c| c.get()), LOG.with(|c| c.get()))
    }
}

#[inline]
fn count_exp() {
    #[cfg(any(test, feature = "op-count"))]
    op_count::EXP.with(|c| c.set(c.get() + 1));
}

#[inline]
fn count_log() {
    #[cfg(any(test, feature = "op-count"))]
    op_count::LOG.with(|c| c.set(c.get() + 1));
}

/// Skew-symmetric matrix `[v]ₓ`.
#[inline]
pub fn hat<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

/// Inverse of [`hat`] applied to the skew part `(M − Mᵀ)/2`.
#[inline]
pub fn vee<T: Real>(m: &Matrix3<T>) -> Vector3<T> {
    Vector3::new(
        (m[(2, 1)] - m[(1, 2)]) * 0.5,
        (m[(0, 2)] - m[(2, 0)]) * 0.5,
        (m[(1, 0)] - m[(0, 1)]) * 0.5,
    )
}

/// Rodrigues formula. Uses a Taylor expansion below 1e-8 rad.
pub fn exp<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    count_exp();
    let theta_sq = v.dot(v);
    let (a, b) = if theta_sq.value() < SMALL_ANGLE_SQ {
        (
            T::one() - theta_sq / 6.0,
            T::from_f64(0.5) - theta_sq / 24.0,
        )
    } else {
        let theta = theta_sq.sqrt();
        (theta.sin() / theta, (T::one() - theta.cos()) / theta_sq)
    };
    let k = hat(v);
    let k2 = k * k;
    Matrix3::identity() + k * a + k2 * b
}

/// Principal logarithm, `‖result‖ ≤ π`.
///
/// Near π the axis is taken from the symmetric part of `R`. At exactly π the
/// sign is ambiguous; the returned axis has its largest-magnitude component
/// positive.
pub fn log<T: Real>(r: &Matrix3<T>) -> Vector3<T> {
    count_log();
    let c = (r.trace() - 1.0) * 0.5;
    // s = sin(θ)·axis
    let s = vee(r);
    let s_sq = s.dot(&s);
    if c.value() > -0.95 {
        if s_sq.value() < SMALL_ANGLE_SQ && c.value() > 0.0 {
            return s * (T::one() + s_sq / 6.0);
        }
        let sin_theta = s_sq.sqrt();
        let theta = sin_theta.atan2(c);
        return s * (theta / sin_theta);
    }

    let sin_theta = if s_sq.value() > 0.0 {
        s_sq.sqrt()
    } else {
        T::zero()
    };
    let theta = sin_theta.atan2(c);
    let one_minus_c = T::one() - c;
    // aaᵀ = (sym(R) − cI) / (1 − c)
    let mut aat = Matrix3::<T>::zeros();
    for i in 0..3 {
        for j in 0..3 {
            let sym = (r[(i, j)] + r[(j, i)]) * 0.5;
            let id = if i == j { c } else { T::zero() };
            aat[(i, j)] = (sym - id) / one_minus_c;
        }
    }
    let mut idx = 0;
    for i in 1..3 {
        if aat[(i, i)].value() > aat[(idx, idx)].value() {
            idx = i;
        }
    }
    let norm = aat[(idx, idx)].sqrt();
    let mut axis = Vector3::new(
        aat[(0, idx)] / norm,
        aat[(1, idx)] / norm,
        aat[(2, idx)] / norm,
    );
    if axis.dot(&s).value() < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// First-order right perturbation `R · (I + [δ]ₓ)`, exact in value and first
/// derivative for `R · Exp(δ)` at `δ = 0`.
#[inline]
pub fn perturb_right<T: Real>(r: &Matrix3<f64>, delta: &Vector3<T>) -> Matrix3<T> {
    let rt = r.map(T::from_f64);
    rt + rt * hat(delta)
}

/// Orthonormal rotation matrix.
#[derive(Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

/// Axis-angle vector in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationVector(pub Vector3<f64>);

impl RotationVector {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        RotationVector(Vector3::new(x, y, z))
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }
}

impl From<Vector3<f64>> for RotationVector {
    fn from(v: Vector3<f64>) -> Self {
        RotationVector(v)
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates orthonormality and handedness within [`ORTHONORMAL_TOL`].
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("rotation matrix has non-finite entries"));
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).norm();
        let det = m.determinant();
        if ortho > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::invalid(format!(
                "matrix is not a rotation (‖RᵀR − I‖ = {ortho:.2e}, det = {det:.6})"
            )));
        }
        Ok(Rotation(m))
    }

    /// Wraps a matrix the caller guarantees to be a rotation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Projects a nearly orthonormal matrix back onto SO(3).
    pub fn renormalized(m: Matrix3<f64>) -> Self {
        let q = UnitQuaternion::from_matrix(&m);
        Rotation(q.to_rotation_matrix().into_inner())
    }

    pub fn exp(v: &RotationVector) -> Result<Self> {
        so3_exp(v)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.normalize();
        Rotation(exp(&(n * angle)))
    }

    pub fn rx(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::x(), angle)
    }
    pub fn ry(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::y(), angle)
    }
    pub fn rz(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle)
    }

    pub fn log(&self) -> RotationVector {
        RotationVector(log(&self.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// Right retraction `R · Exp(δ)`.
    pub fn retract(&self, delta: &Vector3<f64>) -> Self {
        Rotation::renormalized(self.0 * exp(delta))
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        log(&self.0).norm()
    }

    /// Geodesic distance `‖Log(selfᵀ · other)‖`.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.inverse() * *other).angle()
    }

    pub fn to_quaternion_wxyz(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_matrix(&self.0);
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        [q.w, q.i, q.j, q.k]
    }

    pub fn from_quaternion_wxyz(q: [f64; 4]) -> Result<Self> {
        let quat = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
        let n = quat.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::invalid("quaternion has zero or non-finite norm"));
        }
        if (n - 1.0).abs() > 1e-3 {
            return Err(Error::invalid(format!("quaternion norm {n} is not unit")));
        }
        Ok(Rotation(
            UnitQuaternion::from_quaternion(quat)
                .to_rotation_matrix()
                .into_inner(),
        ))
    }

    /// `‖RᵀR − I‖_F` and `|det R − 1|`, for invariant checks.
    pub fn orthonormality_error(&self) -> (f64, f64) {
        (
            (self.0.transpose() * self.0 - Matrix3::identity()).norm(),
            (self.0.determinant() - 1.0).abs(),
        )
    }
}

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.to_quaternion_wxyz();
        write!(
            f,
            "Rotation(wxyz: [{:.6}, {:.6}, {:.6}, {:.6}])",
            q[0], q[1], q[2], q[3]
        )
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Rotation::identity()
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

impl Mul<&Vector3<f64>> for &Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: &Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

impl Serialize for Rotation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_quaternion_wxyz().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Rotation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let q = <[f64; 4]>::deserialize(d)?;
        Rotation::from_quaternion_wxyz(q).map_err(serde::de::Error::custom)
    }
}

/// Rigid transform `x ↦ R·x + t`, e.g. the pose of a sensor in a parent frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose::default()
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * x + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.inverse();
        Pose::new(rt, -(rt.matrix() * self.translation))
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.transform(&other.translation),
        )
    }
}

/// Exponential map; rejects non-finite input.
pub fn so3_exp(v: &RotationVector) -> Result<Rotation> {
    if !v.0.iter().all(|c| c.is_finite()) {
        return Err(Error::invalid("rotation vector has non-finite components"));
    }
    Ok(Rotation(exp(&v.0)))
}

pub fn so3_log(r: &Rotation) -> RotationVector {
    r.log()
}

/// `Ra · Exp(u · Log(Ra⁻¹ Rb))` for `u ∈ [0, 1]`; endpoints are returned exactly.
pub fn slerp(ra: &Rotation, rb: &Rotation, u: f64) -> Result<Rotation> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::invalid(format!("slerp fraction {u} outside [0, 1]")));
    }
    if u == 0.0 {
        return Ok(*ra);
    }
    if u == 1.0 {
        return Ok(*rb);
    }
    let d = log(&(ra.0.transpose() * rb.0));
    Ok(Rotation(ra.0 * exp(&(d * u))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_vector(rng: &mut impl Rng, norm: f64) -> Vector3<f64> {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        v.normalize() * norm
    }

    fn random_rotation(rng: &mut impl Rng) -> Rotation {
        let angle = rng.random_range(0.0..PI * 0.999);
        Rotation(exp(&random_vector(rng, angle)))
    }

    /// Closed-form Rodrigues evaluated from axis and angle separately.
    fn rodrigues_oracle(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
        let (s, c) = angle.sin_cos();
        let a = axis;
        let mut m = Matrix3::identity() * c;
        m += a * a.transpose() * (1.0 - c);
        m += Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0) * s;
        m
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let r = so3_exp(&RotationVector::new(0.0, 0.0, 0.0)).unwrap();
        assert_eq!(*r.matrix(), Matrix3::identity());
    }

    #[test]
    fn exp_of_pi_about_x() {
        let r = so3_exp(&RotationVector::new(PI, 0.0, 0.0)).unwrap();
        let oracle = rodrigues_oracle(Vector3::x(), PI);
        assert_relative_eq!(*r.matrix(), oracle, epsilon = 1e-15);
        assert_relative_eq!(
            *r.matrix(),
            Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)),
            epsilon = 1e-15
        );
    }

    #[test]
    fn exp_rejects_non_finite() {
        assert!(matches!(
            so3_exp(&RotationVector::new(f64::NAN, 0.0, 0.0)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn exp_matches_rodrigues_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let angle = rng.random_range(0.0..3.0);
            let axis = random_vector(&mut rng, 1.0);
            let r = exp(&(axis * angle));
            assert_relative_eq!(r, rodrigues_oracle(axis, angle), epsilon = 1e-14);
        }
    }

    #[test]
    fn log_identity_is_zero() {
        assert_eq!(Rotation::identity().log().0, Vector3::zeros());
    }

    #[test]
    fn log_at_pi_uses_symmetric_part() {
        let r = Rotation::from_matrix(Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)))
            .unwrap();
        let v = r.log().0;
        // Oracle: angle from trace, axis from (R + I)/2.
        let angle = ((r.matrix().trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
        let sym = (r.matrix() + Matrix3::identity()) * 0.5;
        let axis = sym.column(0).normalize();
        assert_relative_eq!(v.norm(), PI, epsilon = 1e-15);
        assert_relative_eq!(v, axis * angle, epsilon = 1e-15);
    }

    #[test]
    fn log_rejects_non_orthonormal() {
        let mut m = Matrix3::identity();
        m[(0, 1)] = 1e-3;
        assert!(Rotation::from_matrix(m).is_err());
    }

    #[test]
    fn roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let v = random_vector(&mut rng, 0.3);
            let back = so3_log(&so3_exp(&RotationVector(v)).unwrap()).0;
            assert!((back - v).norm() < 1e-10);

            let r = random_rotation(&mut rng);
            let again = so3_exp(&so3_log(&r)).unwrap();
            assert!((again.matrix() - r.matrix()).norm() < 1e-10);
        }
    }

    #[test]
    fn log_exp_near_pi_and_tiny_angles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &angle in &[1e-12, 1e-9, 1e-7, 0.5, 2.0, 3.0, PI - 1e-3, PI - 1e-6] {
            for _ in 0..20 {
                let v = random_vector(&mut rng, angle);
                let back = log(&exp(&v));
                assert!((back - v).norm() < 1e-9, "angle {angle}: {back} vs {v}");
            }
        }
    }

    #[test]
    fn slerp_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = random_rotation(&mut rng);
        let same = slerp(&r, &r, 0.7).unwrap();
        assert!((same.matrix() - r.matrix()).norm() < 1e-14);

        let mid = slerp(&Rotation::identity(), &Rotation::rx(PI / 2.0), 0.5).unwrap();
        let oracle = exp(&(log(Rotation::rx(PI / 2.0).matrix()) * 0.5));
        assert_relative_eq!(*mid.matrix(), oracle, epsilon = 1e-14);
        assert_relative_eq!(*mid.matrix(), *Rotation::rx(PI / 4.0).matrix(), epsilon = 1e-14);

        let rb = random_rotation(&mut rng);
        assert!((slerp(&r, &rb, 1.0).unwrap().matrix() - rb.matrix()).norm() < 1e-12);
        assert!(slerp(&r, &rb, 1.5).is_err());
        assert!(slerp(&r, &rb, -0.1).is_err());
    }

    #[test]
    fn slerp_is_geodesic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let ra = random_rotation(&mut rng);
            let angle = rng.random_range(0.0..3.0);
            let rb = ra * Rotation(exp(&random_vector(&mut rng, angle)));
            let u = rng.random_range(0.0..1.0);
            let ru = slerp(&ra, &rb, u).unwrap();
            assert!((ra.angle_to(&ru) - u * ra.angle_to(&rb)).abs() < 1e-8);
        }
    }

    #[test]
    fn composition_stays_on_manifold() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut acc = Rotation::identity();
        for _ in 0..1000 {
            acc = acc * random_rotation(&mut rng);
        }
        let (o, d) = acc.orthonormality_error();
        assert!(o < 1e-9 && d < 1e-9, "{o} {d}");
    }

    #[test]
    fn quaternion_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = random_rotation(&mut rng);
        let q = r.to_quaternion_wxyz();
        assert!(q[0] >= 0.0);
        let back = Rotation::from_quaternion_wxyz(q).unwrap();
        assert!((back.matrix() - r.matrix()).norm() < 1e-12);
    }

    #[test]
    fn log_jet_derivative_matches_finite_differences() {
        use crate::jet::Jet;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &angle in &[0.0f64, 1e-10, 0.4, 2.5, 3.1] {
            let r0 = Rotation(exp(&random_vector(&mut rng, angle.max(1e-300))));
            let r0 = if angle == 0.0 { Rotation::identity() } else { r0 };
            let d = Vector3::new(
                Jet::<3>::variable(0.0, 0),
                Jet::<3>::variable(0.0, 1),
                Jet::<3>::variable(0.0, 2),
            );
            let out = log(&perturb_right(r0.matrix(), &d));
            let h = 1e-6;
            for c in 0..3 {
                let mut e = Vector3::zeros();
                e[c] = h;
                let plus = log(&(r0.matrix() * exp(&e)));
                let minus = log(&(r0.matrix() * exp(&(-e))));
                let fd = (plus - minus) / (2.0 * h);
                for row in 0..3 {
                    assert!(
                        (out[row].eps[c] - fd[row]).abs() < 1e-6,
                        "angle {angle}: d{row}/d{c} {} vs {}",
                        out[row].eps[c],
                        fd[row]
                    );
                }
            }
        }
    }
}
