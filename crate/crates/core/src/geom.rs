//! Rigid-body algebra on SO(3) and SE(3).
//!
//! Rotations are stored as 3×3 matrices. Tangent vectors use the rotation-vector
//! (axis·angle) parameterisation and spatial velocities are ordered
//! `[angular; linear]`, the same order as wrenches `[m; f]`.

use nalgebra::{Matrix3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Below this angle exp/log switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Orthonormality tolerance (Frobenius norm of `RᵀR − I`).
pub const ORTHO_TOL: f64 = 1e-9;

const NEAR_PI: f64 = 1e-3;

/// Skew-symmetric matrix of `w`, so that `hat(w) * v == w × v`.
pub fn hat(w: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`hat`]; reads the off-diagonal entries of a skew matrix.
pub fn vee(m: &Matrix3<f64>) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates orthonormality and handedness before wrapping.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let err = orthonormality_error(&m);
        if err >= ORTHO_TOL || (m.determinant() - 1.0).abs() >= ORTHO_TOL {
            return Err(Error::InvalidRotation(err));
        }
        Ok(Rotation(m))
    }

    /// Wraps `m` without checking. Callers must guarantee `m ∈ SO(3)`.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn about_axis(axis: &Vec3, angle: f64) -> Self {
        exp_so3(&RotVec(axis.normalize() * angle))
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::about_axis(&Vec3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::about_axis(&Vec3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::about_axis(&Vec3::z(), angle)
    }

    /// Intrinsic Z-Y-X (yaw, pitch, roll) Euler angles: `Rz(yaw)·Ry(pitch)·Rx(roll)`.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self::rot_z(yaw) * Self::rot_y(pitch) * Self::rot_x(roll)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn log(&self) -> RotVec {
        log_so3_unchecked(self)
    }

    pub fn angle(&self) -> f64 {
        self.log().angle()
    }

    /// Projects back onto SO(3) via Gram-Schmidt on the columns.
    pub fn renormalized(&self) -> Self {
        let x = self.0.column(0).normalize();
        let y = (self.0.column(1) - x * x.dot(&self.0.column(1))).normalize();
        let z = x.cross(&y);
        Rotation(Matrix3::from_columns(&[x, y, z]))
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

pub fn orthonormality_error(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).norm()
}

/// Rotation vector (axis scaled by angle, radians).
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RotVec(pub Vec3);

impl RotVec {
    pub fn zero() -> Self {
        RotVec(Vec3::zeros())
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    pub fn exp(&self) -> Rotation {
        exp_so3(self)
    }
}

/// Rodrigues' formula.
pub fn exp_so3(w: &RotVec) -> Rotation {
    let theta = w.0.norm();
    let k = hat(&w.0);
    let k2 = k * k;
    let m = if theta < SMALL_ANGLE {
        Matrix3::identity() + k + k2 * 0.5
    } else {
        let (s, c) = theta.sin_cos();
        Matrix3::identity() + k * (s / theta) + k2 * ((1.0 - c) / (theta * theta))
    };
    Rotation(m)
}

/// Logarithm of a rotation; rejects matrices that are not in SO(3).
pub fn log_so3(r: &Rotation) -> Result<RotVec> {
    let m = r.matrix();
    let err = orthonormality_error(m);
    if err >= ORTHO_TOL || (m.determinant() - 1.0).abs() >= ORTHO_TOL {
        return Err(Error::InvalidRotation(err));
    }
    Ok(log_so3_unchecked(r))
}

fn log_so3_unchecked(r: &Rotation) -> RotVec {
    let m = r.matrix();
    // s = sin(θ)·axis
    let s = vee(&(m - m.transpose())) * 0.5;
    let sin_t = s.norm();
    let cos_t = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = sin_t.atan2(cos_t);

    if theta < SMALL_ANGLE {
        return RotVec(s * (1.0 + theta * theta / 6.0));
    }
    if theta < std::f64::consts::PI - NEAR_PI {
        return RotVec(s * (theta / sin_t));
    }

    // Near π the antisymmetric part vanishes; recover the axis from the
    // symmetric part S = cos θ·I + (1 − cos θ)·a·aᵀ.
    let sym = (m + m.transpose()) * 0.5;
    let outer = (sym - Matrix3::identity() * cos_t) / (1.0 - cos_t);
    let (mut best, mut best_val) = (0, outer[(0, 0)]);
    for i in 1..3 {
        if outer[(i, i)] > best_val {
            best = i;
            best_val = outer[(i, i)];
        }
    }
    let mut axis = outer.column(best).into_owned() / best_val.max(f64::MIN_POSITIVE).sqrt();
    axis.normalize_mut();
    if axis.dot(&s) < 0.0 {
        axis = -axis;
    }
    RotVec(axis * theta)
}

/// Rigid transform `x ↦ R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose {
    pub rot: Rotation,
    pub trans: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rot: Rotation::identity(),
            trans: Vec3::zeros(),
        }
    }

    pub fn new(rot: Rotation, trans: Vec3) -> Self {
        Pose { rot, trans }
    }

    pub fn from_translation(trans: Vec3) -> Self {
        Pose {
            rot: Rotation::identity(),
            trans,
        }
    }

    pub fn from_rotation(rot: Rotation) -> Self {
        Pose {
            rot,
            trans: Vec3::zeros(),
        }
    }

    /// Builds a pose from a translation and a rotation vector, the serialized form of actions.
    pub fn from_parts(trans: Vec3, rotvec: RotVec) -> Self {
        Pose {
            rot: exp_so3(&rotvec),
            trans,
        }
    }

    /// Group product `self ∘ other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        compose(self, other)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rot.inverse();
        Pose {
            rot: rt,
            trans: -(rt.apply(&self.trans)),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rot.apply(p) + self.trans
    }

    pub fn rotvec(&self) -> RotVec {
        self.rot.log()
    }

    /// Translation distance and rotation angle of `self⁻¹ ∘ other`.
    pub fn distance_to(&self, other: &Pose) -> (f64, f64) {
        let rel = self.inverse().compose(other);
        (rel.trans.norm(), rel.rot.angle())
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        compose(&self, &rhs)
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        rot: a.rot * b.rot,
        trans: a.rot.apply(&b.trans) + a.trans,
    }
}

/// Spatial velocity, `[angular; linear]`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub angular: Vec3,
    pub linear: Vec3,
}

impl Twist {
    pub fn zero() -> Self {
        Twist::default()
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.angular.x,
            self.angular.y,
            self.angular.z,
            self.linear.x,
            self.linear.y,
            self.linear.z,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Twist {
            angular: Vec3::new(v[0], v[1], v[2]),
            linear: Vec3::new(v[3], v[4], v[5]),
        }
    }

    /// Re-expresses both parts in the frame whose orientation is `rot`.
    pub fn rotated(&self, rot: &Rotation) -> Self {
        Twist {
            angular: rot.apply(&self.angular),
            linear: rot.apply(&self.linear),
        }
    }
}

/// Velocity that moves `current` onto `target` in `dt` (scaled by `gain`),
/// expressed in the current end-effector frame.
///
/// Rotation and translation are decoupled: the angular part is
/// `log(Rcᵀ·Rt)` and the linear part is `Rcᵀ·(pt − pc)`.
pub fn pose_error_twist(current: &Pose, target: &Pose, dt: f64, gain: f64) -> Result<Twist> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let rel = current.inverse().compose(target);
    let k = gain / dt;
    Ok(Twist {
        angular: rel.rot.log().0 * k,
        linear: rel.trans * k,
    })
}
