//! PID admittance on the wrench error and the projection that keeps force
//! corrections off the commanded direction of motion.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::Vector6;
use serde::{Deserialize, Serialize};

use crate::geom::{Pose, RotVec, Vec3};

pub const DEFAULT_KP: f64 = 4e-4;
pub const DEFAULT_KI: f64 = 5e-5;
pub const DEFAULT_KD: f64 = 5e-4;
pub const DEFAULT_INTEGRAL_CLAMP: f64 = 50.0;
/// Actions shorter than this (m or rad) are not projected.
pub const PROJECTION_EPS: f64 = 1e-6;

/// Torque then force. Serialized as a flat `[mx, my, mz, fx, fy, fz]` array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 6]", into = "[f64; 6]")]
pub struct Wrench {
    pub m: Vec3,
    pub f: Vec3,
}

impl Wrench {
    pub fn zero() -> Self {
        Wrench {
            m: Vec3::zeros(),
            f: Vec3::zeros(),
        }
    }

    pub fn new(m: Vec3, f: Vec3) -> Self {
        Wrench { m, f }
    }

    pub fn from_force(f: Vec3) -> Self {
        Wrench { m: Vec3::zeros(), f }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.m.x, self.m.y, self.m.z, self.f.x, self.f.y, self.f.z)
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Wrench {
            m: Vec3::new(v[0], v[1], v[2]),
            f: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().chain(self.f.iter()).all(|v| v.is_finite())
    }
}

impl From<[f64; 6]> for Wrench {
    fn from(a: [f64; 6]) -> Self {
        Wrench::from_vector(&Vector6::from(a))
    }
}

impl From<Wrench> for [f64; 6] {
    fn from(w: Wrench) -> Self {
        w.to_vector().into()
    }
}

impl Add for Wrench {
    type Output = Wrench;
    fn add(self, o: Wrench) -> Wrench {
        Wrench::new(self.m + o.m, self.f + o.f)
    }
}

impl Sub for Wrench {
    type Output = Wrench;
    fn sub(self, o: Wrench) -> Wrench {
        Wrench::new(self.m - o.m, self.f - o.f)
    }
}

impl Neg for Wrench {
    type Output = Wrench;
    fn neg(self) -> Wrench {
        Wrench::new(-self.m, -self.f)
    }
}

impl Mul<f64> for Wrench {
    type Output = Wrench;
    fn mul(self, s: f64) -> Wrench {
        Wrench::new(self.m * s, self.f * s)
    }
}

/// Diagonal gains in `[m, f]` order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmittanceGains {
    pub kp: [f64; 6],
    pub ki: [f64; 6],
    pub kd: [f64; 6],
    /// Symmetric clamp on each integral component (error·s).
    pub integral_clamp: f64,
}

impl Default for AdmittanceGains {
    fn default() -> Self {
        AdmittanceGains::uniform(DEFAULT_KP, DEFAULT_KI, DEFAULT_KD)
    }
}

impl AdmittanceGains {
    pub fn uniform(kp: f64, ki: f64, kd: f64) -> Self {
        AdmittanceGains {
            kp: [kp; 6],
            ki: [ki; 6],
            kd: [kd; 6],
            integral_clamp: DEFAULT_INTEGRAL_CLAMP,
        }
    }

    pub fn is_valid(&self) -> bool {
        let gains_ok = self
            .kp
            .iter()
            .chain(self.ki.iter())
            .chain(self.kd.iter())
            .all(|g| g.is_finite() && *g >= 0.0);
        gains_ok && self.integral_clamp.is_finite() && self.integral_clamp >= 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct AdmittanceState {
    pub integral: [f64; 6],
    pub prev_error: [f64; 6],
    pub initialized: bool,
}

/// One PID tick on `ΔF = target − measured`.
///
/// The derivative is the raw difference of consecutive errors. Dividing it by
/// the 0.1 s period multiplies the effective `kd` by ten and destabilises the
/// loop against contacts stiffer than about 200 N/m.
pub fn pid_step(
    state: &AdmittanceState,
    target: &Wrench,
    measured: &Wrench,
    gains: &AdmittanceGains,
    dt: f64,
) -> (RotVec, Vec3, AdmittanceState) {
    assert!(dt > 0.0, "pid_step: dt must be positive");
    let error = (*target - *measured).to_vector();
    let prev = if state.initialized {
        Vector6::from(state.prev_error)
    } else {
        Vector6::zeros()
    };
    let mut integral = [0.0; 6];
    let mut out = Vector6::zeros();
    for i in 0..6 {
        let bound = gains.integral_clamp;
        integral[i] = (state.integral[i] + error[i] * dt).clamp(-bound, bound);
        out[i] = gains.kp[i] * error[i] + gains.ki[i] * integral[i] + gains.kd[i] * (error[i] - prev[i]);
    }
    let next = AdmittanceState {
        integral,
        prev_error: error.into(),
        initialized: true,
    };
    (
        RotVec(Vec3::new(out[0], out[1], out[2])),
        Vec3::new(out[3], out[4], out[5]),
        next,
    )
}

/// Removes the components of the correction parallel to the action's
/// translation and to its rotation vector.
pub fn project_perpendicular(delta_w: RotVec, delta_p: Vec3, action: &Pose) -> (RotVec, Vec3) {
    let strip = |v: Vec3, dir: Vec3| {
        let len = dir.norm();
        if len > PROJECTION_EPS {
            let d = dir / len;
            v - d * v.dot(&d)
        } else {
            v
        }
    };
    let r = action.rotvec().0;
    (RotVec(strip(delta_w.0, r)), strip(delta_p, action.trans))
}

/// Right-composes the target with the correction `(exp(δw), δp)`.
pub fn compensate(target: &Pose, delta_w: RotVec, delta_p: Vec3) -> Pose {
    target.compose(&Pose::new(delta_w.exp(), delta_p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Rotation;
    use proptest::prelude::*;

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        (a - b).amax() < tol
    }

    #[test]
    fn zero_error_gives_zero_output() {
        let w = Wrench::new(Vec3::new(0.1, 0.2, 0.3), Vec3::new(1.0, 2.0, 3.0));
        let (dw, dp, _) = pid_step(&AdmittanceState::default(), &w, &w, &AdmittanceGains::default(), 0.1);
        assert_eq!(dw.0, Vec3::zeros());
        assert_eq!(dp, Vec3::zeros());
    }

    #[test]
    fn proportional_step_response() {
        let gains = AdmittanceGains::uniform(4e-4, 0.0, 0.0);
        let target = Wrench::from_force(Vec3::new(0.0, 0.0, 10.0));
        let (dw, dp, _) = pid_step(&AdmittanceState::default(), &target, &Wrench::zero(), &gains, 0.1);
        assert_eq!(dw.0, Vec3::zeros());
        assert_eq!(dp, Vec3::new(0.0, 0.0, 4e-4 * 10.0));
    }

    #[test]
    fn rows_map_torque_to_rotation() {
        let gains = AdmittanceGains::uniform(1.0, 0.0, 0.0);
        let target = Wrench::new(Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 5.0, 6.0));
        let (dw, dp, _) = pid_step(&AdmittanceState::default(), &target, &Wrench::zero(), &gains, 0.1);
        assert_eq!(dw.0, Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(dp, Vec3::new(4.0, 5.0, 6.0));
    }

    #[test]
    fn integral_is_clamped() {
        let mut gains = AdmittanceGains::uniform(0.0, 1.0, 0.0);
        gains.integral_clamp = 2.0;
        let target = Wrench::from_force(Vec3::new(10.0, 0.0, 0.0));
        let mut state = AdmittanceState::default();
        let mut last = Vec3::zeros();
        for _ in 0..10 {
            let (_, dp, s) = pid_step(&state, &target, &Wrench::zero(), &gains, 0.1);
            state = s;
            last = dp;
        }
        assert_eq!(state.integral[3], 2.0);
        assert_eq!(last.x, 2.0);
    }

    #[test]
    fn wrench_serializes_torque_first() {
        let w = Wrench::new(Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 5.0, 6.0));
        let s = serde_json::to_string(&w).unwrap();
        assert_eq!(s, "[1.0,2.0,3.0,4.0,5.0,6.0]");
        let back: Wrench = serde_json::from_str(&s).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn projection_removes_action_axis() {
        let action = Pose::from_translation(Vec3::new(1.0, 0.0, 0.0));
        let (_, dp) = project_perpendicular(RotVec::zero(), Vec3::new(0.004, 0.002, 0.0), &action);
        assert!(close(dp, Vec3::new(0.0, 0.002, 0.0), 1e-18));
    }

    #[test]
    fn zero_action_passes_through() {
        let dw = RotVec(Vec3::new(0.01, -0.02, 0.03));
        let dp = Vec3::new(0.004, 0.002, -0.001);
        let (w2, p2) = project_perpendicular(dw, dp, &Pose::identity());
        assert_eq!(w2, dw);
        assert_eq!(p2, dp);
    }

    #[test]
    fn rotation_part_projected_against_rotvec() {
        let action = Pose::from_rotation(Rotation::rot_z(0.2));
        let (w, _) = project_perpendicular(RotVec(Vec3::new(0.1, 0.0, 0.5)), Vec3::zeros(), &action);
        assert!(close(w.0, Vec3::new(0.1, 0.0, 0.0), 1e-15));
    }

    #[test]
    fn compensate_shifts_in_target_frame() {
        let target = Pose::new(Rotation::rot_z(std::f64::consts::FRAC_PI_2), Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(compensate(&target, RotVec::zero(), Vec3::zeros()), target);
        let moved = compensate(&target, RotVec::zero(), Vec3::new(0.1, 0.0, 0.0));
        assert!(close(moved.trans, Vec3::new(1.0, 2.1, 3.0), 1e-15));
    }

    fn vec3() -> impl Strategy<Value = Vec3> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0).prop_map(|(a, b, c)| Vec3::new(a, b, c))
    }

    proptest! {
        #[test]
        fn projection_is_orthogonal_and_idempotent(dw in vec3(), dp in vec3(), t in vec3(), r in vec3()) {
            let action = Pose::from_parts(t * 0.5, RotVec(r));
            let (w1, p1) = project_perpendicular(RotVec(dw), dp, &action);
            if t.norm() * 0.5 > PROJECTION_EPS {
                prop_assert!(p1.dot(&action.trans.normalize()).abs() < 1e-12);
            }
            let (w2, p2) = project_perpendicular(w1, p1, &action);
            prop_assert!((w2.0 - w1.0).amax() < 1e-15 && (p2 - p1).amax() < 1e-15);
        }

        #[test]
        fn compensate_inverse_roundtrip(t in vec3(), r in vec3(), dw in vec3(), dp in vec3()) {
            let target = Pose::from_parts(t, RotVec(r * 2.0));
            let dw = RotVec(dw * 0.3);
            let moved = compensate(&target, dw, dp * 0.1);
            let back = moved.compose(&Pose::new(dw.exp(), dp * 0.1).inverse());
            prop_assert!((back.trans - target.trans).amax() < 1e-12);
            prop_assert!((back.rot.matrix() - target.rot.matrix()).amax() < 1e-12);
        }

        #[test]
        fn pid_is_linear_in_error(f in vec3(), m in vec3(), alpha in -5.0f64..5.0) {
            let gains = AdmittanceGains::default();
            let s0 = AdmittanceState::default();
            let w = Wrench::new(m, f * 10.0);
            let (dw1, dp1, s1) = pid_step(&s0, &w, &Wrench::zero(), &gains, 0.1);
            let (dw2, dp2, s2) = pid_step(&s0, &(w * alpha), &Wrench::zero(), &gains, 0.1);
            prop_assert!((dw2.0 - dw1.0 * alpha).amax() < 1e-12);
            prop_assert!((dp2 - dp1 * alpha).amax() < 1e-12);
            let w_next = w * 0.5;
            let (_, a, _) = pid_step(&s1, &w_next, &Wrench::zero(), &gains, 0.1);
            let (_, b, _) = pid_step(&s2, &(w_next * alpha), &Wrench::zero(), &gains, 0.1);
            prop_assert!((b - a * alpha).amax() < 1e-12);
        }
    }
}
