//! Finite-difference and SVD oracles for the robot kinematics.

use nalgebra::SVD;
use rand::Rng;
use visforce::geom::Vec3;
use visforce::robot::{arm_jacobian, forward_kinematics, generalized_jacobian, ArmVector, BasePose, RobotModel, RobotState};

pub fn random_state(model: &RobotModel, rng: &mut impl Rng) -> RobotState {
    let q = ArmVector::from_fn(|i, _| {
        let [lo, hi] = model.joints[i].limits;
        rng.gen_range(lo * 0.9..hi * 0.9)
    });
    let base = BasePose {
        x: rng.gen_range(-3.0..3.0),
        y: rng.gen_range(-3.0..3.0),
        yaw: rng.gen_range(-3.1..3.1),
    };
    RobotState::new(base, q)
}

/// State displaced by `h` along control column `c` (0: forward, 1: yaw, 2..: arm joints).
fn displaced(state: &RobotState, c: usize, h: f64) -> RobotState {
    let mut s = *state;
    match c {
        0 => {
            let d = state.base.heading() * h;
            s.base.x += d.x;
            s.base.y += d.y;
        }
        1 => s.base.yaw += h,
        _ => s.arm_q[c - 2] += h,
    }
    s
}

/// Central-difference column `[angular; linear]` of the world-frame end-effector velocity.
pub fn fd_column(model: &RobotModel, state: &RobotState, c: usize, h: f64) -> [f64; 6] {
    let plus = forward_kinematics(model, &displaced(state, c, h));
    let minus = forward_kinematics(model, &displaced(state, c, -h));
    let w: Vec3 = (plus.rot * minus.rot.inverse()).log().0 / (2.0 * h);
    let v = (plus.trans - minus.trans) / (2.0 * h);
    [w.x, w.y, w.z, v.x, v.y, v.z]
}

/// Largest column-wise relative error of the generalized Jacobian against central differences.
pub fn jacobian_max_relative_error(model: &RobotModel, state: &RobotState, h: f64) -> f64 {
    let j = generalized_jacobian(model, state);
    let mut worst: f64 = 0.0;
    for c in 0..9 {
        let fd = fd_column(model, state, c, h);
        let col = j.column(c);
        let diff = (0..6).map(|r| (col[r] - fd[r]).powi(2)).sum::<f64>().sqrt();
        let scale = col.norm().max(1.0);
        worst = worst.max(diff / scale);
    }
    worst
}

/// Product of the singular values of the arm Jacobian.
pub fn manipulability_oracle(model: &RobotModel, q: &ArmVector) -> f64 {
    let j = arm_jacobian(model, q);
    let svd = SVD::new(j.clone_owned(), false, false);
    svd.singular_values.iter().product()
}
