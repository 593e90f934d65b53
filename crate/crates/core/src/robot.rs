//! Kinematics of a differential-drive base carrying a 7-DOF serial arm.
//!
//! The arm is described as a chain of fixed translations followed by a joint
//! rotation. With every joint at zero the arm points straight up from its
//! mount; that stretched-out configuration is the model's home pose and is
//! kinematically singular.

use std::path::Path;

use nalgebra::{Matrix6, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Pose, Rotation, Vec3};

pub const ARM_DOF: usize = 7;
pub const BASE_DOF: usize = 2;
pub const CONTROL_DIM: usize = ARM_DOF + BASE_DOF;

pub type ArmVector = SVector<f64, ARM_DOF>;
pub type ControlVec = SVector<f64, CONTROL_DIM>;
pub type ArmJacobian = SMatrix<f64, 6, ARM_DOF>;
pub type WholeBodyJacobian = SMatrix<f64, 6, CONTROL_DIM>;

/// Step used by every finite-difference derivative in this module.
pub const FD_STEP: f64 = 1e-6;

/// Manipulability at or below this value is treated as singular.
pub const SINGULAR_MANIPULABILITY: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    /// Translation from the previous joint frame to this joint, meters.
    pub offset: [f64; 3],
    /// Rotation axis in the joint's own frame.
    pub axis: [f64; 3],
    /// `[min, max]` position, radians.
    pub limits: [f64; 2],
    /// Symmetric velocity bound, rad/s.
    pub max_velocity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotModel {
    /// Arm mount point in the base frame, meters.
    pub mount: [f64; 3],
    pub joints: Vec<JointSpec>,
    /// Flange to tool-centre-point translation, meters.
    pub tool: [f64; 3],
    /// Base forward speed bound, m/s.
    pub base_max_linear: f64,
    /// Base yaw-rate bound, rad/s.
    pub base_max_angular: f64,
}

impl Default for RobotModel {
    /// Link offsets roughly follow a Kinova 7-DOF arm with a parallel gripper.
    fn default() -> Self {
        let z = [0.0, 0.0, 1.0];
        let y = [0.0, 1.0, 0.0];
        let joint = |offset: [f64; 3], axis: [f64; 3], lim: f64, vel: f64| JointSpec {
            offset,
            axis,
            limits: [-lim, lim],
            max_velocity: vel,
        };
        RobotModel {
            mount: [0.15, 0.0, 0.40],
            joints: vec![
                joint([0.0, 0.0, 0.1564], z, 3.0, 0.8),
                joint([0.0, 0.0054, 0.1284], y, 2.25, 0.8),
                joint([0.0, -0.0064, 0.2104], z, 3.0, 0.8),
                joint([0.0, -0.0064, 0.2104], y, 2.55, 0.8),
                joint([0.0, -0.0064, 0.2084], z, 3.0, 1.2),
                joint([0.0, 0.0, 0.1059], y, 2.0, 1.2),
                joint([0.0, 0.0, 0.1059], z, 3.0, 1.2),
            ],
            tool: [0.0, 0.0, 0.20],
            base_max_linear: 0.5,
            base_max_angular: 0.8,
        }
    }
}

impl RobotModel {
    pub fn validate(&self) -> Result<()> {
        if self.joints.len() != ARM_DOF {
            return Err(Error::InvalidModel(format!(
                "expected {ARM_DOF} arm joints, got {}",
                self.joints.len()
            )));
        }
        for (i, j) in self.joints.iter().enumerate() {
            let n = Vec3::from(j.axis).norm();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidModel(format!("joint {i}: axis is not unit length ({n})")));
            }
            if !(j.limits[0] < j.limits[1]) {
                return Err(Error::InvalidModel(format!("joint {i}: min limit must be below max")));
            }
            if !(j.max_velocity > 0.0) {
                return Err(Error::InvalidModel(format!("joint {i}: velocity bound must be positive")));
            }
        }
        if !(self.base_max_linear > 0.0 && self.base_max_angular > 0.0) {
            return Err(Error::InvalidModel("base velocity bounds must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let model: RobotModel = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("robot model always serializes")
    }

    pub fn lower_limits(&self) -> ArmVector {
        ArmVector::from_fn(|i, _| self.joints[i].limits[0])
    }

    pub fn upper_limits(&self) -> ArmVector {
        ArmVector::from_fn(|i, _| self.joints[i].limits[1])
    }

    /// Symmetric velocity bounds for the full control vector `[v, ω, dq…]`.
    pub fn velocity_limits(&self) -> ControlVec {
        ControlVec::from_fn(|i, _| match i {
            0 => self.base_max_linear,
            1 => self.base_max_angular,
            k => self.joints[k - BASE_DOF].max_velocity,
        })
    }

    pub fn smallest_joint_range(&self) -> f64 {
        self.joints
            .iter()
            .map(|j| j.limits[1] - j.limits[0])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn clamp_to_limits(&self, q: &ArmVector) -> ArmVector {
        ArmVector::from_fn(|i, _| q[i].clamp(self.joints[i].limits[0], self.joints[i].limits[1]))
    }
}

/// Planar base pose: position on the floor and heading about world z.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BasePose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl BasePose {
    pub fn to_pose(&self) -> Pose {
        Pose::new(Rotation::rot_z(self.yaw), Vec3::new(self.x, self.y, 0.0))
    }

    pub fn heading(&self) -> Vec3 {
        Vec3::new(self.yaw.cos(), self.yaw.sin(), 0.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub base: BasePose,
    pub arm_q: ArmVector,
}

impl RobotState {
    pub fn new(base: BasePose, arm_q: ArmVector) -> Self {
        RobotState { base, arm_q }
    }

    /// Explicit Euler step: unicycle base, arm `q += dq·dt`, joints clamped to limits.
    pub fn integrate(&self, model: &RobotModel, u: &ControlVector, dt: f64) -> RobotState {
        let heading = self.base.heading();
        let base = BasePose {
            x: self.base.x + u.base_v * heading.x * dt,
            y: self.base.y + u.base_v * heading.y * dt,
            yaw: self.base.yaw + u.base_w * dt,
        };
        let arm_q = model.clamp_to_limits(&(self.arm_q + u.arm_dq * dt));
        RobotState { base, arm_q }
    }
}

/// Velocity command `u = [v, ω, dq₁ … dq₇]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlVector {
    pub base_v: f64,
    pub base_w: f64,
    pub arm_dq: ArmVector,
}

impl ControlVector {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_vector(&self) -> ControlVec {
        ControlVec::from_fn(|i, _| match i {
            0 => self.base_v,
            1 => self.base_w,
            k => self.arm_dq[k - BASE_DOF],
        })
    }

    pub fn from_slice(u: &[f64]) -> Self {
        assert_eq!(u.len(), CONTROL_DIM);
        ControlVector {
            base_v: u[0],
            base_w: u[1],
            arm_dq: ArmVector::from_column_slice(&u[BASE_DOF..]),
        }
    }

    pub fn clamped(&self, model: &RobotModel) -> Self {
        let lim = model.velocity_limits();
        let u = self.to_vector();
        let c: Vec<f64> = (0..CONTROL_DIM).map(|i| u[i].clamp(-lim[i], lim[i])).collect();
        Self::from_slice(&c)
    }
}

/// Joint origins and world-independent axes of the arm, in the base frame.
struct ArmChain {
    origins: [Vec3; ARM_DOF],
    axes: [Vec3; ARM_DOF],
    ee: Pose,
}

fn arm_chain(model: &RobotModel, q: &ArmVector) -> ArmChain {
    let mut frame = Pose::from_translation(Vec3::from(model.mount));
    let mut origins = [Vec3::zeros(); ARM_DOF];
    let mut axes = [Vec3::zeros(); ARM_DOF];
    for (i, j) in model.joints.iter().enumerate() {
        frame = frame.compose(&Pose::from_translation(Vec3::from(j.offset)));
        let axis = Vec3::from(j.axis);
        origins[i] = frame.trans;
        axes[i] = frame.rot.apply(&axis);
        frame = frame.compose(&Pose::from_rotation(Rotation::about_axis(&axis, q[i])));
    }
    let ee = frame.compose(&Pose::from_translation(Vec3::from(model.tool)));
    ArmChain { origins, axes, ee }
}

/// End-effector pose relative to the mobile base.
pub fn arm_forward_kinematics(model: &RobotModel, arm_q: &ArmVector) -> Pose {
    arm_chain(model, arm_q).ee
}

/// End-effector pose in the world frame.
pub fn forward_kinematics(model: &RobotModel, state: &RobotState) -> Pose {
    state.base.to_pose().compose(&arm_forward_kinematics(model, &state.arm_q))
}

/// Arm-only geometric Jacobian in the base frame, rows `[angular; linear]`.
pub fn arm_jacobian(model: &RobotModel, arm_q: &ArmVector) -> ArmJacobian {
    let chain = arm_chain(model, arm_q);
    let mut j = ArmJacobian::zeros();
    for i in 0..ARM_DOF {
        let a = chain.axes[i];
        let lin = a.cross(&(chain.ee.trans - chain.origins[i]));
        j.fixed_view_mut::<3, 1>(0, i).copy_from(&a);
        j.fixed_view_mut::<3, 1>(3, i).copy_from(&lin);
    }
    j
}

/// Whole-body Jacobian in the world frame mapping `[v, ω, dq…]` to the
/// end-effector spatial velocity `[angular; linear]`.
///
/// `v` drives the base along its heading; `ω` turns it about world z through
/// the base origin.
pub fn generalized_jacobian(model: &RobotModel, state: &RobotState) -> WholeBodyJacobian {
    let base = state.base.to_pose();
    let ee = forward_kinematics(model, state);
    let ja = arm_jacobian(model, &state.arm_q);
    let mut j = WholeBodyJacobian::zeros();

    j.fixed_view_mut::<3, 1>(3, 0).copy_from(&state.base.heading());
    let z = Vec3::z();
    j.fixed_view_mut::<3, 1>(0, 1).copy_from(&z);
    j.fixed_view_mut::<3, 1>(3, 1).copy_from(&z.cross(&(ee.trans - base.trans)));

    let r = base.rot.matrix();
    for i in 0..ARM_DOF {
        let ang = r * ja.fixed_view::<3, 1>(0, i);
        let lin = r * ja.fixed_view::<3, 1>(3, i);
        j.fixed_view_mut::<3, 1>(0, BASE_DOF + i).copy_from(&ang);
        j.fixed_view_mut::<3, 1>(3, BASE_DOF + i).copy_from(&lin);
    }
    j
}

/// Yoshikawa measure `sqrt(det(J·Jᵀ))` of the arm Jacobian.
pub fn manipulability(model: &RobotModel, arm_q: &ArmVector) -> f64 {
    let j = arm_jacobian(model, arm_q);
    let jjt: Matrix6<f64> = j * j.transpose();
    jjt.determinant().max(0.0).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ManipulabilityGradient {
    pub grad: ArmVector,
    /// Set when the arm is at or near a singularity and the gradient was zeroed.
    pub degraded: bool,
}

/// Central finite-difference gradient of [`manipulability`] with respect to the arm joints.
pub fn manipulability_gradient(model: &RobotModel, arm_q: &ArmVector) -> ManipulabilityGradient {
    manipulability_gradient_with_step(model, arm_q, FD_STEP)
}

pub fn manipulability_gradient_with_step(
    model: &RobotModel,
    arm_q: &ArmVector,
    h: f64,
) -> ManipulabilityGradient {
    if manipulability(model, arm_q) <= SINGULAR_MANIPULABILITY {
        return ManipulabilityGradient {
            grad: ArmVector::zeros(),
            degraded: true,
        };
    }
    let mut grad = ArmVector::zeros();
    for i in 0..ARM_DOF {
        let mut qp = *arm_q;
        let mut qm = *arm_q;
        qp[i] += h;
        qm[i] -= h;
        grad[i] = (manipulability(model, &qp) - manipulability(model, &qm)) / (2.0 * h);
    }
    ManipulabilityGradient {
        grad,
        degraded: false,
    }
}

/// Damped least-squares arm IK with the base held fixed.
///
/// Returns the final state and the remaining `(translation, rotation)` error.
pub fn solve_arm_ik(
    model: &RobotModel,
    start: &RobotState,
    target: &Pose,
    max_iter: usize,
) -> (RobotState, (f64, f64)) {
    let damping = 1e-3;
    let base = start.base.to_pose();
    let target_in_base = base.inverse().compose(target);
    let mut q = start.arm_q;
    for _ in 0..max_iter {
        let ee = arm_forward_kinematics(model, &q);
        let (dp, dr) = ee.distance_to(&target_in_base);
        if dp < 1e-10 && dr < 1e-10 {
            break;
        }
        // error in the base frame
        let ang = ee.rot.apply(&ee.inverse().compose(&target_in_base).rot.log().0);
        let lin = target_in_base.trans - ee.trans;
        let err = nalgebra::Vector6::new(ang.x, ang.y, ang.z, lin.x, lin.y, lin.z);
        let j = arm_jacobian(model, &q);
        let jjt = j * j.transpose() + Matrix6::identity() * (damping * damping);
        let Some(inv) = jjt.try_inverse() else { break };
        let step = j.transpose() * (inv * err);
        q = model.clamp_to_limits(&(q + step));
    }
    let state = RobotState::new(start.base, q);
    let residual = forward_kinematics(model, &state).distance_to(target);
    (state, residual)
}
