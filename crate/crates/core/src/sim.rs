//! Kinematic world: one articulated object, a rigid grasp with a
//! spring-damper constraint, the force safety monitor, the state featurizer
//! and a scripted expert.

use std::collections::VecDeque;
use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::admittance::Wrench;
use crate::error::{Error, Result};
use crate::geom::{Pose, RotVec, Rotation, Vec3};
use crate::memory::{RawFrame, GRIPPER_CLOSE, GRIPPER_NONE, GRIPPER_OPEN};
use crate::robot::{forward_kinematics, solve_arm_ik, ArmVector, BasePose, ControlVector, RobotModel, RobotState};
use crate::wbc::{WbcConfig, WholeBodyController};

pub const DT: f64 = 0.1;
pub const HARD_FORCE_LIMIT: f64 = 40.0;
pub const AVG_FORCE_LIMIT: f64 = 30.0;
pub const SAFETY_WINDOW: f64 = 1.0;
pub const GRASP_POSITION_TOL: f64 = 0.02;
pub const GRASP_ROTATION_TOL: f64 = 0.15;
pub const SUCCESS_FRACTION: f64 = 0.8;
pub const FEATURE_DIM: usize = 32;
pub const INIT_POSITION_NOISE: f64 = 0.02;
pub const INIT_ROTATION_NOISE: f64 = 0.06;
/// Default side-load friction coefficient of every built-in object.
pub const BINDING: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Drawer,
    Door,
    Tap,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Drawer, TaskId::Door, TaskId::Tap];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Drawer => "drawer",
            TaskId::Door => "door",
            TaskId::Tap => "tap",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTask(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointType {
    Prismatic,
    Revolute,
}

/// Mechanical parameters of the grasp constraint and the object joint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectParams {
    /// N/m.
    pub stiffness: f64,
    /// N·s/m.
    pub damping: f64,
    /// N·m/rad.
    pub rot_stiffness: f64,
    /// N·m·s/rad.
    pub rot_damping: f64,
    /// Breakaway force (N) or torque (N·m) along the joint.
    pub friction: f64,
    /// Extra breakaway per newton of side load on the handle (binding).
    pub binding: f64,
}

/// Partial override of [`ObjectParams`], as read from a run config.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectParamsOverride {
    pub stiffness: Option<f64>,
    pub damping: Option<f64>,
    pub rot_stiffness: Option<f64>,
    pub rot_damping: Option<f64>,
    pub friction: Option<f64>,
    pub binding: Option<f64>,
}

impl ObjectParams {
    pub fn with_override(mut self, o: &ObjectParamsOverride) -> Self {
        self.stiffness = o.stiffness.unwrap_or(self.stiffness);
        self.damping = o.damping.unwrap_or(self.damping);
        self.rot_stiffness = o.rot_stiffness.unwrap_or(self.rot_stiffness);
        self.rot_damping = o.rot_damping.unwrap_or(self.rot_damping);
        self.friction = o.friction.unwrap_or(self.friction);
        self.binding = o.binding.unwrap_or(self.binding);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("stiffness", self.stiffness),
            ("damping", self.damping),
            ("rot_stiffness", self.rot_stiffness),
            ("rot_damping", self.rot_damping),
            ("friction", self.friction),
            ("binding", self.binding),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("object {name} must be non-negative, got {v}")));
            }
        }
        if self.stiffness <= 0.0 || self.rot_stiffness <= 0.0 {
            return Err(Error::Config("object stiffness must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArticulatedObject {
    pub joint_type: JointType,
    /// Unit joint axis in the origin frame.
    pub axis: Vec3,
    pub origin: Pose,
    pub q_max: f64,
    /// Handle frame in the joint child frame; also the canonical grasp pose of the tool.
    pub handle_offset: Pose,
    pub params: ObjectParams,
    pub q: f64,
}

impl ArticulatedObject {
    pub fn for_task(task: TaskId) -> Self {
        let approach = Rotation::rot_y(FRAC_PI_2);
        match task {
            TaskId::Drawer => ArticulatedObject {
                joint_type: JointType::Prismatic,
                axis: Vec3::new(-1.0, 0.0, 0.0),
                origin: Pose::from_translation(Vec3::new(1.05, 0.0, 0.55)),
                q_max: 0.25,
                handle_offset: Pose::from_rotation(approach),
                params: ObjectParams {
                    stiffness: 800.0,
                    damping: 10.0,
                    rot_stiffness: 15.0,
                    rot_damping: 0.3,
                    binding: BINDING,
                    friction: 6.0,
                },
                q: 0.0,
            },
            TaskId::Door => ArticulatedObject {
                joint_type: JointType::Revolute,
                axis: Vec3::new(0.0, 0.0, -1.0),
                origin: Pose::from_translation(Vec3::new(1.00, 0.40, 0.60)),
                q_max: 1.2,
                handle_offset: Pose::new(approach, Vec3::new(0.0, -0.35, 0.0)),
                params: ObjectParams {
                    stiffness: 800.0,
                    damping: 10.0,
                    rot_stiffness: 15.0,
                    rot_damping: 0.3,
                    binding: BINDING,
                    friction: 1.5,
                },
                q: 0.0,
            },
            TaskId::Tap => ArticulatedObject {
                joint_type: JointType::Revolute,
                axis: Vec3::new(0.0, 0.0, 1.0),
                origin: Pose::new(approach, Vec3::new(1.00, 0.0, 0.65)),
                q_max: 1.5,
                handle_offset: Pose::from_translation(Vec3::new(0.0, 0.03, 0.0)),
                params: ObjectParams {
                    stiffness: 800.0,
                    damping: 10.0,
                    rot_stiffness: 15.0,
                    rot_damping: 0.3,
                    binding: BINDING,
                    friction: 0.2,
                },
                q: 0.0,
            },
        }
    }

    fn joint_motion(&self, q: f64) -> Pose {
        match self.joint_type {
            JointType::Prismatic => Pose::from_translation(self.axis * q),
            JointType::Revolute => Pose::from_rotation(Rotation::about_axis(&self.axis, q)),
        }
    }

    /// Handle frame in the world at joint value `q`.
    pub fn handle_pose(&self, q: f64) -> Pose {
        self.origin.compose(&self.joint_motion(q)).compose(&self.handle_offset)
    }

    pub fn completion_fraction(&self) -> f64 {
        self.q / self.q_max
    }

    /// World-frame velocity of a point rigidly attached to the child link at
    /// `point`, per unit joint rate: (linear, angular).
    fn joint_screw(&self, point: &Vec3) -> (Vec3, Vec3) {
        let w = self.origin.rot.apply(&self.axis);
        match self.joint_type {
            JointType::Prismatic => (w, Vec3::zeros()),
            JointType::Revolute => (w.cross(&(point - self.origin.trans)), w),
        }
    }

    /// Joint value minimising the grasp spring energy for the tool at `ee`.
    fn equilibrium(&self, ee: &Pose, grasp: &Pose) -> f64 {
        let p = &self.params;
        let mut q = self.q;
        for _ in 0..5 {
            let g = self.handle_pose(q).compose(grasp);
            let e_p = ee.trans - g.trans;
            let e_r = rotation_error(&ee.rot, &g.rot);
            let (lin, ang) = self.joint_screw(&g.trans);
            let denom = p.stiffness * lin.norm_squared() + p.rot_stiffness * ang.norm_squared();
            let step = (p.stiffness * lin.dot(&e_p) + p.rot_stiffness * ang.dot(&e_r)) / denom;
            q += step;
            if step.abs() < 1e-12 {
                break;
            }
        }
        q
    }

    /// Breakaway along the joint with the tool at `ee`: base friction plus
    /// binding from the spring force component across the handle's path.
    fn breakaway(&self, ee: &Pose, grasp: &Pose) -> f64 {
        let g = self.handle_pose(self.q).compose(grasp);
        let (lin, _) = self.joint_screw(&g.trans);
        let lever = lin.norm();
        if lever < 1e-12 {
            return self.params.friction;
        }
        let dir = lin / lever;
        let f = (ee.trans - g.trans) * self.params.stiffness;
        let side = (f - dir * f.dot(&dir)).norm();
        self.params.friction + self.params.binding * side * lever
    }

    fn generalized_stiffness(&self, grasp: &Pose) -> f64 {
        let g = self.handle_pose(self.q).compose(grasp);
        let (lin, ang) = self.joint_screw(&g.trans);
        self.params.stiffness * lin.norm_squared() + self.params.rot_stiffness * ang.norm_squared()
    }
}

/// World-frame rotation vector taking `b` to `a`.
fn rotation_error(a: &Rotation, b: &Rotation) -> Vec3 {
    (*a * b.inverse()).log().0
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub task: TaskId,
    pub robot: RobotState,
    pub object: ArticulatedObject,
    pub gripper_closed: bool,
    pub attached: bool,
    /// Tool pose in the handle frame, fixed at attachment.
    pub grasp: Pose,
    pub time: f64,
    /// Constraint deviation (linear, angular) in the world frame at the last step.
    prev_deviation: Option<(Vec3, Vec3)>,
}

impl WorldState {
    pub fn new(task: TaskId, robot: RobotState, object: ArticulatedObject) -> Self {
        WorldState {
            task,
            robot,
            object,
            gripper_closed: false,
            attached: false,
            grasp: Pose::identity(),
            time: 0.0,
            prev_deviation: None,
        }
    }

    pub fn ee_pose(&self, model: &RobotModel) -> Pose {
        forward_kinematics(model, &self.robot)
    }

    /// Tool pose relative to the current handle frame.
    pub fn ee_in_handle(&self, model: &RobotModel) -> Pose {
        self.object.handle_pose(self.object.q).inverse().compose(&self.ee_pose(model))
    }

    /// Whether the tool is close enough to the handle to grasp it.
    pub fn can_grasp(&self, model: &RobotModel) -> bool {
        let (dp, dr) = self.ee_in_handle(model).distance_to(&Pose::identity());
        dp <= GRASP_POSITION_TOL && dr <= GRASP_ROTATION_TOL
    }

    /// Closes on the handle. The fingers centre and align the handle, keeping
    /// only the grasp depth along the approach axis; the rest of the approach
    /// offset is left in the grasp spring.
    pub fn attach(&mut self, model: &RobotModel) {
        let depth = self.ee_in_handle(model).trans.z;
        self.attach_with(Pose::from_translation(Vec3::new(0.0, 0.0, depth)));
    }

    /// Attaches with an explicit grasp transform, leaving any deviation in the spring.
    pub fn attach_with(&mut self, grasp: Pose) {
        self.attached = true;
        self.gripper_closed = true;
        self.grasp = grasp;
        self.prev_deviation = None;
    }

    /// Applies a gripper command. Closing attaches only within the grasp tolerance.
    pub fn apply_gripper(&mut self, model: &RobotModel, command: i8) {
        match command {
            GRIPPER_CLOSE => {
                if !self.attached && self.can_grasp(model) {
                    self.attach(model);
                } else {
                    self.gripper_closed = true;
                }
            }
            GRIPPER_OPEN => {
                self.gripper_closed = false;
                self.attached = false;
                self.prev_deviation = None;
            }
            _ => {}
        }
    }
}

/// Integrates the robot and the object over one period and returns the wrench
/// the tool applies to the handle, in the tool frame, `[m, f]`.
///
/// The object follows the energy-minimising joint value unless the generalized
/// spring force along the joint stays below the breakaway friction.
pub fn step_world(model: &RobotModel, w: &WorldState, u: &ControlVector, dt: f64) -> (WorldState, Wrench) {
    let mut next = w.clone();
    next.robot = w.robot.integrate(model, u, dt);
    next.time = w.time + dt;
    if !w.attached {
        next.prev_deviation = None;
        return (next, Wrench::zero());
    }

    let ee = forward_kinematics(model, &next.robot);
    let obj = &mut next.object;
    let q_eq = obj.equilibrium(&ee, &w.grasp);
    let k_q = obj.generalized_stiffness(&w.grasp);
    let drive = k_q * (q_eq - obj.q);
    let friction = obj.breakaway(&ee, &w.grasp);
    if drive.abs() > friction {
        obj.q = q_eq - drive.signum() * friction / k_q;
    }
    obj.q = obj.q.clamp(0.0, obj.q_max);

    let g = obj.handle_pose(obj.q).compose(&w.grasp);
    let e_p = ee.trans - g.trans;
    let e_r = rotation_error(&ee.rot, &g.rot);
    let (de_p, de_r) = match w.prev_deviation {
        Some((p, r)) => ((e_p - p) / dt, (e_r - r) / dt),
        None => (Vec3::zeros(), Vec3::zeros()),
    };
    let p = &obj.params;
    let f_world = e_p * p.stiffness + de_p * p.damping;
    let m_world = e_r * p.rot_stiffness + de_r * p.rot_damping;
    next.prev_deviation = Some((e_p, e_r));
    let to_tool = ee.rot.inverse();
    (next, Wrench::new(to_tool.apply(&m_world), to_tool.apply(&f_world)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyStatus {
    Ok,
    HardStop,
    AvgStop,
}

/// Force-norm limits over a sliding one-second window.
#[derive(Clone, Debug)]
pub struct SafetyMonitor {
    window: VecDeque<f64>,
    capacity: usize,
    pub hard_limit: f64,
    pub avg_limit: f64,
}

impl SafetyMonitor {
    pub fn new(dt: f64) -> Self {
        let capacity = ((SAFETY_WINDOW / dt) - 1e-9).ceil().max(1.0) as usize;
        SafetyMonitor {
            window: VecDeque::with_capacity(capacity),
            capacity,
            hard_limit: HARD_FORCE_LIMIT,
            avg_limit: AVG_FORCE_LIMIT,
        }
    }

    pub fn window_len(&self) -> usize {
        self.capacity
    }

    pub fn check(&mut self, wrench: &Wrench) -> SafetyStatus {
        let f = wrench.f.norm();
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(f);
        if f > self.hard_limit {
            return SafetyStatus::HardStop;
        }
        if self.window.len() == self.capacity {
            let mean = self.window.iter().sum::<f64>() / self.capacity as f64;
            if mean > self.avg_limit {
                return SafetyStatus::AvgStop;
            }
        }
        SafetyStatus::Ok
    }
}

const FEATURE_INPUTS: usize = 12;
const POSITION_SCALE: f64 = 0.1;
const ROTATION_SCALE: f64 = 0.2;

/// Seeded random projection `tanh(W x + b)` of a low-dimensional state summary.
#[derive(Clone, Debug)]
pub struct Featurizer {
    w: DMatrix<f64>,
    b: DVector<f64>,
}

impl Featurizer {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (FEATURE_INPUTS as f64).sqrt();
        let w = DMatrix::from_fn(dim, FEATURE_INPUTS, |_, _| rng.sample::<f64, _>(StandardNormal) * scale);
        let b = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.1);
        Featurizer { w, b }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// State summary: tool pose in the handle frame, progress, gripper flags, task code.
    pub fn inputs(model: &RobotModel, world: &WorldState) -> DVector<f64> {
        let rel = world.ee_in_handle(model);
        let r = rel.rotvec().0;
        let flag = |b: bool| if b { 1.0 } else { -1.0 };
        let mut x = DVector::zeros(FEATURE_INPUTS);
        for i in 0..3 {
            x[i] = rel.trans[i] / POSITION_SCALE;
            x[3 + i] = r[i] / ROTATION_SCALE;
        }
        x[6] = 2.0 * world.object.completion_fraction();
        x[7] = flag(world.gripper_closed);
        x[8] = flag(world.attached);
        x[9 + world.task.index()] = 2.0;
        x
    }

    /// Embedding of `world`; `noise_std > 0` adds Gaussian noise drawn from `rng`.
    pub fn featurize(&self, model: &RobotModel, world: &WorldState, noise_std: f64, rng: &mut impl Rng) -> Vec<f64> {
        let x = Self::inputs(model, world);
        let z = (&self.w * x + &self.b).map(f64::tanh);
        z.iter()
            .map(|v| {
                if noise_std > 0.0 {
                    v + noise_std * rng.sample::<f64, _>(StandardNormal)
                } else {
                    *v
                }
            })
            .collect()
    }
}

/// Initial tool pose before perturbation: the grasp pose backed off along the approach axis.
pub fn pregrasp_pose(object: &ArticulatedObject, backoff: f64) -> Pose {
    object
        .handle_pose(object.q)
        .compose(&Pose::from_translation(Vec3::new(0.0, 0.0, -backoff)))
}

pub const PREGRASP_BACKOFF: f64 = 0.12;

/// Arm configuration used to seed inverse kinematics.
pub fn ready_configuration() -> ArmVector {
    ArmVector::from_column_slice(&[0.0, 0.5, 0.0, 1.5, 0.0, -0.43, 0.0])
}

/// Tool pose perturbation: translation `U(±pos)` per axis, roll/pitch/yaw `U(±rot)`.
pub fn sample_pose_noise(rng: &mut impl Rng, pos: f64, rot: f64) -> Pose {
    let mut u = |a: f64| if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
    let t = Vec3::new(u(pos), u(pos), u(pos));
    let r = Rotation::from_euler(u(rot), u(rot), u(rot));
    Pose::new(r, t)
}

/// World with the tool at `ee_target` (placed by inverse kinematics, base at the origin).
pub fn world_at(model: &RobotModel, task: TaskId, object: ArticulatedObject, ee_target: &Pose) -> Result<WorldState> {
    let seed = RobotState::new(BasePose::default(), ready_configuration());
    let (robot, (dp, dr)) = solve_arm_ik(model, &seed, ee_target, 500);
    if dp > 1e-6 || dr > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "initial tool pose unreachable for {task} (residual {dp:.2e} m, {dr:.2e} rad)"
        )));
    }
    Ok(WorldState::new(task, robot, object))
}

/// Start state: pregrasp pose with the tool perturbed in its own frame.
pub fn sample_initial_world(
    model: &RobotModel,
    task: TaskId,
    object: ArticulatedObject,
    rng: &mut impl Rng,
    pos_noise: f64,
    rot_noise: f64,
) -> Result<WorldState> {
    let nominal = pregrasp_pose(&object, PREGRASP_BACKOFF);
    let noise = sample_pose_noise(rng, pos_noise, rot_noise);
    let target = Pose::new(nominal.rot * noise.rot, nominal.trans + noise.trans);
    world_at(model, task, object, &target)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ExpertPhase {
    Approach,
    Close,
    Manipulate,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertCommand {
    pub waypoint: Pose,
    pub gripper: i8,
    pub done: bool,
}

/// Deterministic demonstrator: approach the handle, close, drive the joint to its limit.
#[derive(Clone, Debug)]
pub struct ScriptedExpert {
    pub task: TaskId,
    phase: ExpertPhase,
    q_cmd: f64,
    pub max_translation_step: f64,
    pub max_rotation_step: f64,
}

impl ScriptedExpert {
    pub fn new(task: TaskId) -> Self {
        ScriptedExpert {
            task,
            phase: ExpertPhase::Approach,
            q_cmd: 0.0,
            max_translation_step: 0.005,
            max_rotation_step: 0.05,
        }
    }

    fn joint_step(&self, object: &ArticulatedObject) -> f64 {
        match object.joint_type {
            JointType::Prismatic => self.max_translation_step,
            JointType::Revolute => {
                let g = object.handle_pose(object.q);
                let (lin, _) = object.joint_screw(&g.trans);
                (self.max_translation_step / lin.norm().max(1e-9)).min(self.max_rotation_step)
            }
        }
    }

    pub fn next(&mut self, model: &RobotModel, w: &WorldState) -> ExpertCommand {
        let ee = w.ee_pose(model);
        match self.phase {
            ExpertPhase::Approach => {
                let goal = w.object.handle_pose(w.object.q);
                let (dp, dr) = ee.distance_to(&goal);
                if dp < 5e-4 && dr < 5e-3 {
                    self.phase = ExpertPhase::Close;
                    return self.next(model, w);
                }
                let step = ee.inverse().compose(&goal);
                let scale_t = (self.max_translation_step / dp.max(1e-12)).min(1.0);
                let scale_r = (self.max_rotation_step / dr.max(1e-12)).min(1.0);
                let s = scale_t.min(scale_r);
                let delta = Pose::from_parts(step.trans * s, RotVec(step.rotvec().0 * s));
                ExpertCommand {
                    waypoint: ee.compose(&delta),
                    gripper: GRIPPER_NONE,
                    done: false,
                }
            }
            ExpertPhase::Close => {
                self.phase = ExpertPhase::Manipulate;
                self.q_cmd = w.object.q;
                ExpertCommand {
                    waypoint: ee,
                    gripper: GRIPPER_CLOSE,
                    done: false,
                }
            }
            ExpertPhase::Manipulate => {
                let obj = &w.object;
                if !w.attached || obj.q >= 0.995 * obj.q_max {
                    self.phase = ExpertPhase::Done;
                    return self.next(model, w);
                }
                let lag = obj.params.friction / obj.generalized_stiffness(&w.grasp);
                let cap = obj.q_max + 1.5 * lag;
                self.q_cmd = (self.q_cmd + self.joint_step(obj)).min(cap);
                ExpertCommand {
                    waypoint: obj.handle_pose(self.q_cmd).compose(&w.grasp),
                    gripper: GRIPPER_NONE,
                    done: false,
                }
            }
            ExpertPhase::Done => ExpertCommand {
                waypoint: ee,
                gripper: GRIPPER_NONE,
                done: true,
            },
        }
    }
}

/// Drives the scripted expert from `start` and records one raw frame per tick.
pub fn record_expert_episode(
    model: &RobotModel,
    start: WorldState,
    wbc: &WbcConfig,
    featurizer: &Featurizer,
    max_ticks: usize,
) -> Result<(Vec<RawFrame>, WorldState)> {
    let mut expert = ScriptedExpert::new(start.task);
    let mut controller = WholeBodyController::new(*wbc);
    let mut world = start;
    let mut wrench = Wrench::zero();
    let mut frames = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..max_ticks {
        let embedding = featurizer.featurize(model, &world, 0.0, &mut rng);
        let ee = world.ee_pose(model);
        let cmd = expert.next(model, &world);
        if cmd.gripper != GRIPPER_NONE {
            world.apply_gripper(model, cmd.gripper);
        }
        frames.push(RawFrame {
            pose: ee,
            gripper_closed: world.gripper_closed,
            wrench,
            embedding,
        });
        if cmd.done {
            break;
        }
        let out = controller.step(model, &world.robot, &cmd.waypoint, !world.attached);
        if out.failed() {
            return Err(Error::InvalidTrajectory {
                traj: world.task.to_string(),
                reason: format!("controller failed at t = {:.1}", world.time),
            });
        }
        let (next, w) = step_world(model, &world, &out.control, DT);
        world = next;
        wrench = w;
    }
    Ok((frames, world))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attached_drawer(model: &RobotModel) -> WorldState {
        let object = ArticulatedObject::for_task(TaskId::Drawer);
        let grasp = object.handle_pose(0.0);
        let mut w = world_at(model, TaskId::Drawer, object, &grasp).unwrap();
        w.attach(model);
        w
    }

    #[test]
    fn task_names_roundtrip() {
        for t in TaskId::ALL {
            assert_eq!(t.name().parse::<TaskId>().unwrap(), t);
        }
        assert!(matches!("sink".parse::<TaskId>(), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn unattached_world_has_no_wrench() {
        let model = RobotModel::default();
        let object = ArticulatedObject::for_task(TaskId::Door);
        let w = world_at(&model, TaskId::Door, object.clone(), &pregrasp_pose(&object, 0.1)).unwrap();
        let mut u = ControlVector::zero();
        u.arm_dq[3] = 0.3;
        let (_, wrench) = step_world(&model, &w, &u, DT);
        assert_eq!(wrench, Wrench::zero());
    }

    #[test]
    fn perpendicular_offset_gives_hooke_force() {
        let model = RobotModel::default();
        let mut w = attached_drawer(&model);
        w.object.params.stiffness = 500.0;
        // grasp 1 cm off the tool along world y, which is perpendicular to the drawer axis
        let g = w.grasp;
        let shift = w.object.handle_pose(0.0).rot.inverse().apply(&Vec3::new(0.0, 0.01, 0.0));
        w.attach_with(Pose::new(g.rot, g.trans - shift));
        let (_, wrench) = step_world(&model, &w, &ControlVector::zero(), DT);
        assert!((wrench.f.norm() - 5.0).abs() < 1e-6, "{}", wrench.f.norm());
        // the tool pushes the handle towards itself, i.e. along +y in the world
        let ee = w.ee_pose(&model);
        let f_world = ee.rot.apply(&wrench.f);
        assert!((f_world - Vec3::new(0.0, 5.0, 0.0)).amax() < 1e-6, "{f_world:?}");
    }

    #[test]
    fn motion_along_axis_without_friction_is_force_free() {
        let model = RobotModel::default();
        let mut w = attached_drawer(&model);
        w.object.params.friction = 0.0;
        let mut controller = WholeBodyController::new(WbcConfig::default());
        for k in 1..=10 {
            let target = w.object.handle_pose(0.005 * k as f64).compose(&w.grasp);
            let out = controller.step(&model, &w.robot, &target, false);
            let (next, wrench) = step_world(&model, &w, &out.control, DT);
            // kinematic integration is exact to first order, so the residual is second order in the step
            assert!(wrench.f.norm() < 1e-2, "{}", wrench.f.norm());
            w = next;
        }
        assert!(w.object.q > 0.04);
    }

    #[test]
    fn ideal_axis_motion_gives_zero_off_axis_wrench() {
        let model = RobotModel::default();
        let mut w = attached_drawer(&model);
        w.object.params.friction = 0.0;
        // move the tool exactly along the drawer axis by re-placing the arm
        let target = w.object.handle_pose(0.03).compose(&w.grasp);
        let (robot, _) = solve_arm_ik(&model, &w.robot, &target, 500);
        let arm_dq = (robot.arm_q - w.robot.arm_q) / DT;
        let u = ControlVector {
            base_v: 0.0,
            base_w: 0.0,
            arm_dq,
        };
        let (next, wrench) = step_world(&model, &w, &u, DT);
        assert!((next.object.q - 0.03).abs() < 1e-9);
        let v = wrench.to_vector();
        assert!(v.amax() < 1e-6, "{v:?}");
    }

    #[test]
    fn stiction_holds_object_below_breakaway() {
        let model = RobotModel::default();
        let w = attached_drawer(&model);
        let k = w.object.params.stiffness;
        let f = w.object.params.friction;
        // pull by less than the breakaway deflection
        let small = 0.5 * f / k;
        let g = w.grasp;
        let target = w.object.handle_pose(small).compose(&g);
        let (robot, _) = solve_arm_ik(&model, &w.robot, &target, 500);
        let u = ControlVector {
            base_v: 0.0,
            base_w: 0.0,
            arm_dq: (robot.arm_q - w.robot.arm_q) / DT,
        };
        let (next, _) = step_world(&model, &w, &u, DT);
        assert_eq!(next.object.q, 0.0);
        // pulling further breaks away and leaves a lag of friction / k
        let target = w.object.handle_pose(0.02).compose(&g);
        let (robot, _) = solve_arm_ik(&model, &w.robot, &target, 500);
        let u = ControlVector {
            base_v: 0.0,
            base_w: 0.0,
            arm_dq: (robot.arm_q - w.robot.arm_q) / DT,
        };
        let (next, wrench) = step_world(&model, &w, &u, DT);
        assert!((next.object.q - (0.02 - f / k)).abs() < 1e-6);
        assert!(wrench.f.norm() > 0.0);
    }

    fn step_to(model: &RobotModel, w: &WorldState, target: &Pose) -> (WorldState, Wrench) {
        let (robot, _) = solve_arm_ik(model, &w.robot, target, 500);
        let u = ControlVector {
            base_v: 0.0,
            base_w: 0.0,
            arm_dq: (robot.arm_q - w.robot.arm_q) / DT,
        };
        step_world(model, w, &u, DT)
    }

    #[test]
    fn side_load_raises_breakaway() {
        let model = RobotModel::default();
        let mut w = attached_drawer(&model);
        let p = w.object.params;
        // 1 cm sideways seating offset: side load k * 0.01 adds binding * k * 0.01
        let side = 0.01;
        w.attach_with(Pose::from_translation(Vec3::new(0.0, side, 0.0)));
        let pull = (p.friction + 0.5 * p.binding * p.stiffness * side) / p.stiffness;
        let target = w.object.handle_pose(pull);
        let (held, _) = step_to(&model, &w, &target);
        assert_eq!(held.object.q, 0.0);
        w.object.params.binding = 0.0;
        let (moved, _) = step_to(&model, &w, &target);
        assert!((moved.object.q - (pull - p.friction / p.stiffness)).abs() < 1e-6);
    }

    #[test]
    fn closing_keeps_only_the_grasp_depth() {
        let model = RobotModel::default();
        let object = ArticulatedObject::for_task(TaskId::Door);
        let offset = Pose::new(Rotation::rot_x(0.05), Vec3::new(0.008, -0.006, 0.01));
        let ee = object.handle_pose(0.0).compose(&offset);
        let mut w = world_at(&model, TaskId::Door, object, &ee).unwrap();
        assert!(w.can_grasp(&model));
        w.apply_gripper(&model, GRIPPER_CLOSE);
        assert!(w.attached);
        assert_eq!(w.grasp.rot, Rotation::identity());
        assert_eq!(w.grasp.trans.xy(), nalgebra::Vector2::zeros());
        assert!((w.grasp.trans.z - 0.01).abs() < 1e-6);
        // the lateral and angular offsets now load the spring
        let (_, wrench) = step_world(&model, &w, &ControlVector::zero(), DT);
        assert!(wrench.f.norm() > 5.0 && wrench.m.norm() > 0.5, "{wrench:?}");
    }

    #[test]
    fn object_stays_in_range() {
        let model = RobotModel::default();
        let mut w = attached_drawer(&model);
        let mut controller = WholeBodyController::new(WbcConfig::default());
        for k in 0..80 {
            let target = w.object.handle_pose(0.01 * k as f64).compose(&w.grasp);
            let out = controller.step(&model, &w.robot, &target, false);
            w = step_world(&model, &w, &out.control, DT).0;
            assert!(w.object.q >= 0.0 && w.object.q <= w.object.q_max);
        }
        assert_eq!(w.object.q, w.object.q_max);
    }

    #[test]
    fn held_still_wrench_does_not_grow() {
        let model = RobotModel::default();
        let mut w = attached_drawer(&model);
        let g = w.grasp;
        w.attach_with(g.compose(&Pose::from_translation(Vec3::new(0.004, -0.006, 0.01))));
        let mut last = f64::INFINITY;
        for _ in 0..20 {
            let (next, wrench) = step_world(&model, &w, &ControlVector::zero(), DT);
            let mag = wrench.to_vector().norm();
            assert!(mag <= last + 1e-9);
            last = mag;
            w = next;
        }
    }

    #[test]
    fn safety_thresholds() {
        let mut m = SafetyMonitor::new(0.1);
        assert_eq!(m.window_len(), 10);
        assert_eq!(m.check(&Wrench::from_force(Vec3::new(45.0, 0.0, 0.0))), SafetyStatus::HardStop);

        let mut m = SafetyMonitor::new(0.1);
        let w31 = Wrench::from_force(Vec3::new(0.0, 31.0, 0.0));
        for _ in 0..9 {
            assert_eq!(m.check(&w31), SafetyStatus::Ok);
        }
        assert_eq!(m.check(&w31), SafetyStatus::AvgStop);

        let mut m = SafetyMonitor::new(0.1);
        let w20 = Wrench::from_force(Vec3::new(0.0, 0.0, 20.0));
        assert!((0..1000).all(|_| m.check(&w20) == SafetyStatus::Ok));
    }

    #[test]
    fn featurizer_is_deterministic_and_sensitive_to_progress() {
        let model = RobotModel::default();
        let f = Featurizer::new(5, FEATURE_DIM);
        let w = attached_drawer(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = f.featurize(&model, &w, 0.0, &mut rng);
        let b = f.featurize(&model, &w, 0.0, &mut rng);
        assert_eq!(a, b);
        assert_eq!(a.len(), FEATURE_DIM);
        let mut w2 = w.clone();
        w2.object.q = 0.1;
        let c = f.featurize(&model, &w2, 0.0, &mut rng);
        assert!(a.iter().zip(&c).map(|(x, y)| (x - y).powi(2)).sum::<f64>() > 0.0);
        let noisy = f.featurize(&model, &w, 0.1, &mut rng);
        assert_ne!(noisy, a);
    }

    #[test]
    fn gripper_attaches_only_near_handle() {
        let model = RobotModel::default();
        let object = ArticulatedObject::for_task(TaskId::Drawer);
        let mut far = world_at(&model, TaskId::Drawer, object.clone(), &pregrasp_pose(&object, 0.05)).unwrap();
        far.apply_gripper(&model, GRIPPER_CLOSE);
        assert!(far.gripper_closed && !far.attached);
        let mut near = world_at(&model, TaskId::Drawer, object.clone(), &pregrasp_pose(&object, 0.015)).unwrap();
        near.apply_gripper(&model, GRIPPER_CLOSE);
        assert!(near.attached);
        near.apply_gripper(&model, GRIPPER_OPEN);
        assert!(!near.attached && !near.gripper_closed);
    }

    #[test]
    fn expert_completes_every_task() {
        let model = RobotModel::default();
        let f = Featurizer::new(5, FEATURE_DIM);
        for task in TaskId::ALL {
            let object = ArticulatedObject::for_task(task);
            let start = world_at(&model, task, object.clone(), &pregrasp_pose(&object, PREGRASP_BACKOFF)).unwrap();
            let (frames, end) = record_expert_episode(&model, start, &WbcConfig::default(), &f, 600).unwrap();
            assert!(end.object.q >= 0.99 * end.object.q_max, "{task}: q = {}", end.object.q);
            let closes = frames
                .windows(2)
                .filter(|p| !p[0].gripper_closed && p[1].gripper_closed)
                .count();
            assert_eq!(closes, 1, "{task}");
            let contact_force = frames.iter().filter(|r| r.gripper_closed).map(|r| r.wrench.f.norm()).fold(0.0, f64::max);
            assert!(contact_force > 0.0, "{task}");
        }
    }
}
