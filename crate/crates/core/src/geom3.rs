//! Rigid-body algebra shared by every other module.
//!
//! # Conventions
//!
//! - A [`Pose`] maps points as `p' = R·p + t` (column vectors).
//! - A pose named `a_to_b` expresses frame `b` in frame `a`: it maps
//!   coordinates given in `b` into coordinates in `a`. So
//!   `base_to_camera.transform_point(p_cam)` yields the point in `robot_base`.
//! - Frames are right-handed, units are meters, a camera looks along `+z`.
//! - Quaternions are kept on the `w >= 0` hemisphere so that equal rotations
//!   compare equal.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Isometry3, Matrix3, Matrix4, Quaternion, Rotation3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// 3D point, translation or direction in meters.
pub type Vec3 = Vector3<f64>;

/// Largest rotation angle accepted by [`rodrigues_log`].
pub const LOG_ANGLE_LIMIT: f64 = std::f64::consts::PI - 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("rotation angle {angle} rad is within 1e-6 of pi; the logarithm is ambiguous there")]
    AngleNearPi { angle: f64 },
    #[error("frame id must not be empty")]
    EmptyFrameId,
    #[error("pose contains non-finite values")]
    NonFinite,
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
}

/// Flip a quaternion onto the `w >= 0` hemisphere.
///
/// For `w == 0` the first nonzero vector component is made positive so the
/// representative is unique.
pub fn canonicalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let c = q.quaternion().coords; // [x, y, z, w]
    let flip = if c.w != 0.0 {
        c.w < 0.0
    } else if c.x != 0.0 {
        c.x < 0.0
    } else if c.y != 0.0 {
        c.y < 0.0
    } else {
        c.z < 0.0
    };
    if flip {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

fn renormalize(q: Quaternion<f64>) -> UnitQuaternion<f64> {
    canonicalize(UnitQuaternion::new_normalize(q))
}

/// Rigid transform `p' = R·p + t`.
#[derive(Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vec3,
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self { rotation: renormalize(rotation.into_inner()), translation }
    }

    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vec3::zeros() }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: t }
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::new(rotation, Vec3::zeros())
    }

    /// Builds a pose from a rotation matrix that is already orthonormal
    /// (up to rounding).
    pub fn from_matrix(r: &Matrix3<f64>, t: Vec3) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*r);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), t)
    }

    /// Quaternion components `[w, x, y, z]` and translation; normalizes `q`.
    pub fn from_wxyz(q: [f64; 4], t: [f64; 3]) -> Result<Self, GeomError> {
        if q.iter().chain(t.iter()).any(|v| !v.is_finite()) {
            return Err(GeomError::NonFinite);
        }
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        if quat.norm() == 0.0 {
            return Err(GeomError::ZeroQuaternion);
        }
        Ok(Self { rotation: renormalize(quat), translation: Vec3::new(t[0], t[1], t[2]) })
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        self.to_isometry().to_homogeneous()
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }

    /// `[w, x, y, z]`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// The pose mapping `p ↦ self(other(p))`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: renormalize(self.rotation.into_inner() * other.rotation.into_inner()),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rinv = self.rotation.inverse();
        Pose { rotation: canonicalize(rinv), translation: -(rinv * self.translation) }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn is_finite(&self) -> bool {
        self.wxyz().iter().all(|v| v.is_finite()) && self.translation.iter().all(|v| v.is_finite())
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

impl fmt::Debug for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [w, x, y, z] = self.wxyz();
        let t = self.translation;
        write!(f, "Pose {{ q: [{w}, {x}, {y}, {z}], t: [{}, {}, {}] }}", t.x, t.y, t.z)
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    q: [f64; 4],
    t: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let t = self.translation;
        PoseRepr { q: self.wxyz(), t: [t.x, t.y, t.z] }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = PoseRepr::deserialize(d)?;
        Pose::from_wxyz(r.q, r.t).map_err(serde::de::Error::custom)
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn invert(p: &Pose) -> Pose {
    p.inverse()
}

pub fn transform_point(p: &Pose, v: &Vec3) -> Vec3 {
    p.transform_point(v)
}

/// Rotation of `|v|` radians about `v / |v|`.
pub fn rodrigues_exp(axis_angle: &Vec3) -> UnitQuaternion<f64> {
    let theta = axis_angle.norm();
    let half = 0.5 * theta;
    // sin(θ/2)/θ, with its Taylor expansion near zero.
    let k = if theta < 1e-8 { 0.5 - theta * theta / 48.0 } else { half.sin() / theta };
    let q = Quaternion::new(half.cos(), k * axis_angle.x, k * axis_angle.y, k * axis_angle.z);
    renormalize(q)
}

/// Principal-branch rotation vector of `q`.
pub fn rodrigues_log(q: &UnitQuaternion<f64>) -> Result<Vec3, GeomError> {
    let q = canonicalize(*q);
    let w = q.quaternion().w;
    let v = q.quaternion().imag();
    let s = v.norm();
    let angle = 2.0 * s.atan2(w);
    if angle >= LOG_ANGLE_LIMIT {
        return Err(GeomError::AngleNearPi { angle });
    }
    let k = if s < 1e-10 { 2.0 / w } else { angle / s };
    Ok(v * k)
}

/// Rotation angle of a quaternion in `[0, π]`.
pub fn rotation_angle(q: &UnitQuaternion<f64>) -> f64 {
    let q = q.quaternion();
    2.0 * q.imag().norm().atan2(q.w.abs())
}

/// Angle of `a_R⁻¹·b_R` and the distance between translations.
pub fn pose_error(a: &Pose, b: &Pose) -> (f64, f64) {
    let rel = a.rotation.inverse() * b.rotation;
    (rotation_angle(&rel), (a.translation - b.translation).norm())
}

/// Named coordinate frame.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FrameId(String);

impl FrameId {
    pub const ROBOT_BASE: &'static str = "robot_base";
    pub const CAMERA: &'static str = "camera";
    pub const END_EFFECTOR: &'static str = "end_effector";
    pub const MARKER: &'static str = "marker";
    pub const OBJECT: &'static str = "object";

    pub fn new(name: impl Into<String>) -> Result<Self, GeomError> {
        let name = name.into();
        if name.is_empty() {
            return Err(GeomError::EmptyFrameId);
        }
        Ok(Self(name))
    }

    pub fn robot_base() -> Self {
        Self(Self::ROBOT_BASE.to_owned())
    }

    pub fn camera() -> Self {
        Self(Self::CAMERA.to_owned())
    }

    pub fn object() -> Self {
        Self(Self::OBJECT.to_owned())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for FrameId {
    type Error = GeomError;
    fn try_from(s: String) -> Result<Self, GeomError> {
        FrameId::new(s)
    }
}

impl From<FrameId> for String {
    fn from(f: FrameId) -> String {
        f.0
    }
}

impl fmt::Debug for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Skew-symmetric matrix with `skew(a)·b = a × b`.
pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Nearest rotation matrix (Frobenius sense) with determinant +1.
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Chordal L2 mean of rotations: principal eigenvector of `Σ qqᵀ`.
pub fn average_rotations(qs: &[UnitQuaternion<f64>]) -> Option<UnitQuaternion<f64>> {
    if qs.is_empty() {
        return None;
    }
    let mut m = Matrix4::zeros();
    for q in qs {
        let c = q.quaternion().coords;
        m += c * c.transpose();
    }
    let eig = m.symmetric_eigen();
    let (imax, _) = eig.eigenvalues.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let c = eig.eigenvectors.column(imax);
    Some(renormalize(Quaternion::new(c[3], c[0], c[1], c[2])))
}
