//! Whole-body velocity controller: one small QP per tick.
//!
//! ```text
//!     minimize    ½ uᵀQu + cᵀu       Q = diag(w_b I₂, w_a I₇),  c = (0, 0, −k_m ∇m)
//!     subject to  J u = v_e
//!                 velocity dampers near joint limits
//!                 −u_max <= u <= u_max
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{pose_error_twist, Pose, Twist};
use crate::qp::{ActiveSetSolver, QpProblem, QpStatus};
use crate::robot::{
    forward_kinematics, generalized_jacobian, manipulability_gradient, ControlVector, RobotModel,
    RobotState, ARM_DOF, BASE_DOF, CONTROL_DIM,
};

/// Penalty on the equality residual when the hard problem is infeasible.
pub const SOFTENING_WEIGHT: f64 = 1e6;
pub const QP_MAX_ITER: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WbcConfig {
    pub base_weight: f64,
    pub arm_weight: f64,
    pub manip_gain: f64,
    /// Distance to a joint limit (rad) below which the damper row is added.
    pub damper_influence: f64,
    pub damper_gain: f64,
    /// Distance to a joint limit (rad) the damper keeps in reserve.
    pub damper_margin: f64,
    pub tracking_gain: f64,
    pub dt: f64,
    pub max_linear_speed: f64,
    pub max_angular_speed: f64,
}

impl Default for WbcConfig {
    fn default() -> Self {
        WbcConfig {
            base_weight: 10.0,
            arm_weight: 1.0,
            manip_gain: 0.01,
            damper_influence: 0.17,
            damper_gain: 1.0,
            damper_margin: 0.02,
            tracking_gain: 1.0,
            dt: 0.1,
            max_linear_speed: 0.5,
            max_angular_speed: 1.0,
        }
    }
}

impl WbcConfig {
    pub fn validate(&self, model: &RobotModel) -> Result<()> {
        let positive = [
            ("base_weight", self.base_weight),
            ("arm_weight", self.arm_weight),
            ("damper_influence", self.damper_influence),
            ("damper_gain", self.damper_gain),
            ("tracking_gain", self.tracking_gain),
            ("dt", self.dt),
            ("max_linear_speed", self.max_linear_speed),
            ("max_angular_speed", self.max_angular_speed),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("wbc.{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("manip_gain", self.manip_gain), ("damper_margin", self.damper_margin)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("wbc.{name} must be non-negative, got {v}")));
            }
        }
        if self.damper_influence >= 0.5 * model.smallest_joint_range() {
            return Err(Error::Config(format!(
                "wbc.damper_influence {} must be below half the smallest joint range {}",
                self.damper_influence,
                model.smallest_joint_range()
            )));
        }
        if self.damper_margin >= self.damper_influence {
            return Err(Error::Config("wbc.damper_margin must be below damper_influence".into()));
        }
        Ok(())
    }
}

/// End-effector twist towards `target` in the world frame, each part capped in norm.
pub fn desired_twist(model: &RobotModel, state: &RobotState, target: &Pose, cfg: &WbcConfig) -> Twist {
    let ee = forward_kinematics(model, state);
    let local = pose_error_twist(&ee, target, cfg.dt, cfg.tracking_gain)
        .expect("dt validated positive");
    let cap = |v: crate::geom::Vec3, max: f64| {
        let n = v.norm();
        if n > max {
            v * (max / n)
        } else {
            v
        }
    };
    let world = local.rotated(&ee.rot);
    Twist {
        angular: cap(world.angular, cfg.max_angular_speed),
        linear: cap(world.linear, cfg.max_linear_speed),
    }
}

pub fn build_problem(
    model: &RobotModel,
    state: &RobotState,
    target: &Pose,
    cfg: &WbcConfig,
    base_locked: bool,
) -> QpProblem {
    let n = CONTROL_DIM;
    let mut q = DMatrix::zeros(n, n);
    for i in 0..n {
        q[(i, i)] = if i < BASE_DOF { cfg.base_weight } else { cfg.arm_weight };
    }

    let mut c = DVector::zeros(n);
    if cfg.manip_gain > 0.0 {
        let g = manipulability_gradient(model, &state.arm_q);
        for i in 0..ARM_DOF {
            c[BASE_DOF + i] = -cfg.manip_gain * g.grad[i];
        }
    }

    let j = generalized_jacobian(model, state);
    let a_eq = DMatrix::from_fn(6, n, |r, k| j[(r, k)]);
    let v = desired_twist(model, state, target, cfg).to_vector();
    let b_eq = DVector::from_fn(6, |r, _| v[r]);

    let vel = model.velocity_limits();
    let mut lb = DVector::from_fn(n, |i, _| -vel[i]);
    let mut ub = DVector::from_fn(n, |i, _| vel[i]);
    if base_locked {
        for i in 0..BASE_DOF {
            lb[i] = 0.0;
            ub[i] = 0.0;
        }
    }

    let lower = model.lower_limits();
    let upper = model.upper_limits();
    let mut rows: Vec<(usize, f64, f64)> = Vec::new();
    for i in 0..ARM_DOF {
        let col = BASE_DOF + i;
        let qi = state.arm_q[i];
        if upper[i] - qi < cfg.damper_influence {
            let cap = cfg.damper_gain * (upper[i] - qi - cfg.damper_margin) / cfg.dt;
            rows.push((col, 1.0, cap.max(lb[col])));
        }
        if qi - lower[i] < cfg.damper_influence {
            let cap = cfg.damper_gain * (qi - lower[i] - cfg.damper_margin) / cfg.dt;
            rows.push((col, -1.0, cap.max(-ub[col])));
        }
    }
    let mut a_in = DMatrix::zeros(rows.len(), n);
    let mut b_in = DVector::zeros(rows.len());
    for (r, &(col, sign, rhs)) in rows.iter().enumerate() {
        a_in[(r, col)] = sign;
        b_in[r] = rhs;
    }

    QpProblem {
        q,
        c,
        a_eq,
        b_eq,
        a_in,
        b_in,
        lb,
        ub,
    }
}

/// The hard problem with `J u = v_e` moved into the cost as a stiff penalty.
pub fn soften(p: &QpProblem, weight: f64) -> QpProblem {
    let at = p.a_eq.transpose();
    let n = p.n();
    QpProblem {
        q: &p.q + &at * &p.a_eq * weight,
        c: &p.c - &at * &p.b_eq * weight,
        a_eq: DMatrix::zeros(0, n),
        b_eq: DVector::zeros(0),
        a_in: p.a_in.clone(),
        b_in: p.b_in.clone(),
        lb: p.lb.clone(),
        ub: p.ub.clone(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WbcStatus {
    Tracking,
    Softened,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WbcOutput {
    pub control: ControlVector,
    pub status: WbcStatus,
    /// `‖J u − v_e‖`.
    pub tracking_residual: f64,
}

impl WbcOutput {
    pub fn failed(&self) -> bool {
        self.status == WbcStatus::Failed
    }
}

/// Controller instance owning the QP warm start.
#[derive(Clone, Debug)]
pub struct WholeBodyController {
    pub cfg: WbcConfig,
    solver: ActiveSetSolver,
    soft_solver: ActiveSetSolver,
}

impl WholeBodyController {
    pub fn new(cfg: WbcConfig) -> Self {
        WholeBodyController {
            cfg,
            solver: ActiveSetSolver::new(QP_MAX_ITER),
            soft_solver: ActiveSetSolver::new(QP_MAX_ITER),
        }
    }

    pub fn step(
        &mut self,
        model: &RobotModel,
        state: &RobotState,
        target: &Pose,
        base_locked: bool,
    ) -> WbcOutput {
        let p = build_problem(model, state, target, &self.cfg, base_locked);
        let residual = |u: &DVector<f64>| (&p.a_eq * u - &p.b_eq).norm();

        if let Ok(s) = self.solver.solve(&p) {
            if s.status != QpStatus::Infeasible {
                return WbcOutput {
                    control: ControlVector::from_slice(s.u.as_slice()),
                    status: WbcStatus::Tracking,
                    tracking_residual: residual(&s.u),
                };
            }
        }
        let soft = soften(&p, SOFTENING_WEIGHT);
        match self.soft_solver.solve(&soft) {
            Ok(s) if s.status != QpStatus::Infeasible => WbcOutput {
                control: ControlVector::from_slice(s.u.as_slice()),
                status: WbcStatus::Softened,
                tracking_residual: residual(&s.u),
            },
            _ => WbcOutput {
                control: ControlVector::zero(),
                status: WbcStatus::Failed,
                tracking_residual: f64::INFINITY,
            },
        }
    }
}

/// Stateless single step with a fresh solver.
pub fn step(
    model: &RobotModel,
    state: &RobotState,
    target: &Pose,
    cfg: &WbcConfig,
    base_locked: bool,
) -> WbcOutput {
    WholeBodyController::new(*cfg).step(model, state, target, base_locked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use crate::robot::{manipulability, ArmVector, BasePose};

    fn ready_state() -> RobotState {
        RobotState::new(
            BasePose::default(),
            ArmVector::from_column_slice(&[0.0, 0.6, 0.0, 1.4, 0.0, 1.0, 0.0]),
        )
    }

    #[test]
    fn holding_still_gives_zero_velocity() {
        let model = RobotModel::default();
        let state = ready_state();
        let target = forward_kinematics(&model, &state);
        let cfg = WbcConfig {
            manip_gain: 0.0,
            ..WbcConfig::default()
        };
        let out = step(&model, &state, &target, &cfg, false);
        assert_eq!(out.status, WbcStatus::Tracking);
        assert!(out.control.to_vector().amax() < 1e-12);
    }

    #[test]
    fn locked_base_stays_exactly_still() {
        let model = RobotModel::default();
        let state = ready_state();
        let target = forward_kinematics(&model, &state).compose(&Pose::from_translation(Vec3::new(0.005, 0.0025, 0.0)));
        let out = step(&model, &state, &target, &WbcConfig::default(), true);
        assert_eq!(out.status, WbcStatus::Tracking);
        assert_eq!(out.control.base_v, 0.0);
        assert_eq!(out.control.base_w, 0.0);
        assert!(out.tracking_residual < 1e-6);
    }

    #[test]
    fn damper_row_caps_joint_near_limit() {
        let model = RobotModel::default();
        let cfg = WbcConfig::default();
        let mut state = ready_state();
        let upper = model.upper_limits()[3];
        state.arm_q[3] = upper - 0.5 * cfg.damper_influence;
        let p = build_problem(&model, &state, &forward_kinematics(&model, &state), &cfg, false);
        assert_eq!(p.a_in.nrows(), 1);
        assert_eq!(p.a_in[(0, BASE_DOF + 3)], 1.0);
        let expected = cfg.damper_gain * (0.5 * cfg.damper_influence - cfg.damper_margin) / cfg.dt;
        assert!((p.b_in[0] - expected).abs() < 1e-12);
        assert!(p.b_in[0] > 0.0 && p.b_in[0] < model.velocity_limits()[BASE_DOF + 3]);
    }

    #[test]
    fn repeated_calls_are_identical() {
        let model = RobotModel::default();
        let state = ready_state();
        let target = forward_kinematics(&model, &state).compose(&Pose::from_translation(Vec3::new(0.05, 0.0, 0.02)));
        let mut ctl = WholeBodyController::new(WbcConfig::default());
        let a = ctl.step(&model, &state, &target, false);
        let b = ctl.step(&model, &state, &target, false);
        assert_eq!(a.control.to_vector(), b.control.to_vector());
        assert_eq!(a, step(&model, &state, &target, &WbcConfig::default(), false));
    }

    #[test]
    fn converges_on_nearby_target() {
        let model = RobotModel::default();
        let mut state = ready_state();
        let target = forward_kinematics(&model, &state).compose(&Pose::from_translation(Vec3::new(0.01, 0.0, 0.0)));
        let cfg = WbcConfig::default();
        let mut ctl = WholeBodyController::new(cfg);
        let mut ticks = 0;
        while ticks < 50 {
            let out = ctl.step(&model, &state, &target, false);
            let lim = model.velocity_limits();
            let u = out.control.to_vector();
            assert!((0..CONTROL_DIM).all(|i| u[i].abs() <= lim[i] + 1e-12));
            state = state.integrate(&model, &out.control, cfg.dt);
            ticks += 1;
            if forward_kinematics(&model, &state).distance_to(&target).0 < 5e-3 {
                break;
            }
        }
        assert!(forward_kinematics(&model, &state).distance_to(&target).0 < 5e-3, "ticks {ticks}");
    }

    #[test]
    fn far_target_is_capped_not_infeasible() {
        let model = RobotModel::default();
        let state = ready_state();
        let target = forward_kinematics(&model, &state).compose(&Pose::from_translation(Vec3::new(3.0, 0.0, 0.0)));
        let out = step(&model, &state, &target, &WbcConfig::default(), false);
        assert!(!out.failed());
    }

    #[test]
    fn manipulability_term_helps_when_holding() {
        let model = RobotModel::default();
        let cfg_on = WbcConfig {
            manip_gain: 0.05,
            ..WbcConfig::default()
        };
        let cfg_off = WbcConfig {
            manip_gain: 0.0,
            ..WbcConfig::default()
        };
        let start = ready_state();
        let target = forward_kinematics(&model, &start);
        let run = |cfg: WbcConfig| {
            let mut s = start;
            let mut ctl = WholeBodyController::new(cfg);
            for _ in 0..100 {
                let out = ctl.step(&model, &s, &target, true);
                s = s.integrate(&model, &out.control, cfg.dt);
            }
            manipulability(&model, &s.arm_q)
        };
        assert!(run(cfg_on) >= run(cfg_off) - 1e-6);
    }
}
