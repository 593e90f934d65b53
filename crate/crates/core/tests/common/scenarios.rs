//! Closed-loop scenarios shared by the integration and acceptance tests.

use visforce::admittance::{compensate, pid_step, project_perpendicular, AdmittanceGains, AdmittanceState, Wrench};
use visforce::geom::{Pose, Vec3};
use visforce::robot::RobotModel;
use visforce::sim::{step_world, world_at, ArticulatedObject, TaskId, DT};
use visforce::wbc::{WbcConfig, WholeBodyController};

pub const REGULATION_TARGET: f64 = 5.0;
pub const REGULATION_STIFFNESS: f64 = 500.0;
/// Pull per tick along the drawer axis (tool −z).
pub const REGULATION_PULL: f64 = 0.001;

/// Drawer grasped at its handle, pulled open while the admittance law tracks a
/// constant force along tool y, perpendicular to the motion. Returns the
/// measured wrench after every tick.
pub fn drawer_force_regulation(ticks: usize, gains: &AdmittanceGains) -> Vec<Wrench> {
    let model = RobotModel::default();
    let mut object = ArticulatedObject::for_task(TaskId::Drawer);
    object.params.stiffness = REGULATION_STIFFNESS;
    let handle = object.handle_pose(0.0);
    let mut world = world_at(&model, TaskId::Drawer, object, &handle).unwrap();
    world.attach(&model);

    let target = Wrench::from_force(Vec3::new(0.0, REGULATION_TARGET, 0.0));
    let action = Pose::from_translation(Vec3::new(0.0, 0.0, -REGULATION_PULL));
    let mut controller = WholeBodyController::new(WbcConfig::default());
    let mut adm = AdmittanceState::default();
    let mut measured = Wrench::zero();
    let mut out = Vec::with_capacity(ticks);
    for _ in 0..ticks {
        let nominal = world.ee_pose(&model).compose(&action);
        let (dw, dp, next) = pid_step(&adm, &target, &measured, gains, DT);
        adm = next;
        let (dw, dp) = project_perpendicular(dw, dp, &action);
        let goal = compensate(&nominal, dw, dp);
        let u = controller.step(&model, &world.robot, &goal, false);
        assert!(!u.failed(), "controller failed");
        let (w, wrench) = step_world(&model, &world, &u.control, DT);
        world = w;
        measured = wrench;
        out.push(wrench);
    }
    out
}

/// Largest relative force error along the regulated axis over the final `window` ticks.
pub fn steady_state_error(trace: &[Wrench], window: usize) -> f64 {
    trace[trace.len() - window..]
        .iter()
        .map(|w| (w.f.y - REGULATION_TARGET).abs() / REGULATION_TARGET)
        .fold(0.0, f64::max)
}
