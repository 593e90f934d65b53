//! Online loop: featurize, retrieve, compose the target, correct it with the
//! admittance law, solve the whole-body QP and step the world. Also batch
//! evaluation over tasks, trials and ablation arms, and the wrench metrics.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admittance::{compensate, pid_step, project_perpendicular, AdmittanceGains, AdmittanceState, Wrench};
use crate::error::{Error, Result};
use crate::geom::{Pose, RotVec, Vec3};
use crate::memory::{resample, to_frames, ExpertDataset, ExpertFrame, ResampleThresholds, GRIPPER_CLOSE, GRIPPER_NONE};
use crate::robot::{BasePose, RobotModel};
use crate::sim::{
    record_expert_episode, sample_initial_world, step_world, ArticulatedObject, Featurizer, ObjectParamsOverride, SafetyMonitor,
    SafetyStatus, TaskId, WorldState, INIT_POSITION_NOISE, INIT_ROTATION_NOISE, SUCCESS_FRACTION,
};
use crate::wbc::{WbcConfig, WholeBodyController};

pub const DEFAULT_MAX_ITER: usize = 200;
pub const DEFAULT_TRIALS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Approach,
    Grasp,
    Contact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    TerminateFlag,
    MaxIter,
    HardStop,
    AvgStop,
    ControllerFailure,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub task: TaskId,
    pub max_iter: usize,
    pub admittance_enabled: bool,
    pub rotation_enabled: bool,
    /// Seeds the featurizer noise stream.
    pub seed: u64,
    pub noise_std: f64,
    /// Retrieve only among frames of `task`.
    pub task_filter: bool,
}

impl RolloutConfig {
    pub fn new(task: TaskId, seed: u64) -> Self {
        RolloutConfig {
            task,
            max_iter: DEFAULT_MAX_ITER,
            admittance_enabled: true,
            rotation_enabled: true,
            seed,
            noise_std: 0.0,
            task_filter: false,
        }
    }
}

/// Controller settings shared by every rollout of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlParams {
    pub wbc: WbcConfig,
    pub gains: AdmittanceGains,
}

/// One line of a rollout trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: usize,
    pub time: f64,
    pub phase: Phase,
    pub base: BasePose,
    pub arm_q: [f64; 7],
    pub object_q: f64,
    /// Wrench measured after this tick's motion, `[m, f]` in the tool frame.
    pub wrench: Wrench,
    pub safety: SafetyStatus,
    pub matched_index: usize,
    pub similarity: f64,
    pub gripper: i8,
    pub action_t: [f64; 3],
    pub action_r: [f64; 3],
    /// Admittance correction applied this tick (rotation vector, translation).
    pub delta_w: [f64; 3],
    pub delta_p: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub success: bool,
    pub termination: Termination,
    pub steps: usize,
    pub completion_fraction: f64,
    pub grasped: bool,
    pub wrench_trace: Vec<Wrench>,
    /// Per tick: whether the wrench was measured in the contact phase.
    pub contact: Vec<bool>,
    pub trace: Vec<TickRecord>,
}

impl RolloutResult {
    pub fn contact_wrenches(&self) -> Vec<Wrench> {
        self.wrench_trace
            .iter()
            .zip(&self.contact)
            .filter(|(_, c)| **c)
            .map(|(w, _)| *w)
            .collect()
    }
}

fn arr3(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Runs one rollout from `world`.
pub fn run(
    cfg: &RolloutConfig,
    params: &ControlParams,
    ds: &ExpertDataset,
    model: &RobotModel,
    featurizer: &Featurizer,
    mut world: WorldState,
) -> Result<RolloutResult> {
    let dt = params.wbc.dt;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut controller = WholeBodyController::new(params.wbc);
    let mut safety = SafetyMonitor::new(dt);
    let mut adm = AdmittanceState::default();
    let mut phase = Phase::Approach;
    let mut grasped = false;
    let mut measured = Wrench::zero();
    let mut wrench_trace = Vec::new();
    let mut contact = Vec::new();
    let mut trace = Vec::new();
    let mut termination = Termination::MaxIter;

    for tick in 0..cfg.max_iter {
        let z = featurizer.featurize(model, &world, cfg.noise_std, &mut rng);
        let pred = if cfg.task_filter {
            ds.retrieve_for_task(&z, cfg.task.name())?
        } else {
            ds.retrieve(&z)?
        };
        if pred.terminate {
            termination = Termination::TerminateFlag;
            break;
        }

        let current = world.ee_pose(model);
        let mut action = pred.action;
        if !cfg.rotation_enabled {
            action = Pose::from_translation(action.trans);
        }
        let mut delta = (RotVec::zero(), Vec3::zeros());
        let target = if pred.gripper != GRIPPER_NONE {
            world.apply_gripper(model, pred.gripper);
            if pred.gripper == GRIPPER_CLOSE && phase == Phase::Approach {
                phase = Phase::Grasp;
            }
            action = Pose::identity();
            current
        } else {
            let mut target = current.compose(&action);
            if phase == Phase::Contact && cfg.admittance_enabled {
                let (dw, dp, next) = pid_step(&adm, &pred.target_wrench, &measured, &params.gains, dt);
                adm = next;
                let (dw, dp) = project_perpendicular(dw, dp, &action);
                target = compensate(&target, dw, dp);
                delta = (dw, dp);
            }
            target
        };
        match (world.attached, phase) {
            (true, Phase::Approach | Phase::Grasp) => {
                phase = Phase::Contact;
                grasped = true;
                adm = AdmittanceState::default();
                safety = SafetyMonitor::new(dt);
            }
            (false, Phase::Contact) => phase = Phase::Approach,
            _ => {}
        }

        let out = controller.step(model, &world.robot, &target, phase != Phase::Contact);
        if out.failed() {
            termination = Termination::ControllerFailure;
            break;
        }
        let in_contact = world.attached;
        let (next, wrench) = step_world(model, &world, &out.control, dt);
        world = next;
        measured = wrench;
        wrench_trace.push(wrench);
        contact.push(in_contact);

        let status = if phase == Phase::Contact {
            safety.check(&wrench)
        } else {
            SafetyStatus::Ok
        };
        let r = action.rotvec().0;
        trace.push(TickRecord {
            tick,
            time: world.time,
            phase,
            base: world.robot.base,
            arm_q: world.robot.arm_q.into(),
            object_q: world.object.q,
            wrench,
            safety: status,
            matched_index: pred.matched_index,
            similarity: pred.similarity,
            gripper: pred.gripper,
            action_t: arr3(&action.trans),
            action_r: arr3(&r),
            delta_w: arr3(&delta.0 .0),
            delta_p: arr3(&delta.1),
        });
        match status {
            SafetyStatus::HardStop => {
                termination = Termination::HardStop;
                break;
            }
            SafetyStatus::AvgStop => {
                termination = Termination::AvgStop;
                break;
            }
            SafetyStatus::Ok => {}
        }
    }

    let completion_fraction = world.object.completion_fraction();
    Ok(RolloutResult {
        success: completion_fraction >= SUCCESS_FRACTION,
        termination,
        steps: trace.len(),
        completion_fraction,
        grasped,
        wrench_trace,
        contact,
        trace,
    })
}

/// Per-axis mean absolute value and population variance of `[m, f]` samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WrenchStats {
    pub samples: usize,
    pub mean_abs: [f64; 6],
    pub variance: [f64; 6],
}

impl WrenchStats {
    pub fn from_samples(ws: &[Wrench]) -> Self {
        let n = ws.len();
        if n == 0 {
            return WrenchStats::default();
        }
        let mut mean_abs = [0.0; 6];
        let mut mean = [0.0; 6];
        for w in ws {
            let v = w.to_vector();
            for i in 0..6 {
                mean_abs[i] += v[i].abs();
                mean[i] += v[i];
            }
        }
        for i in 0..6 {
            mean_abs[i] /= n as f64;
            mean[i] /= n as f64;
        }
        let mut variance = [0.0; 6];
        for w in ws {
            let v = w.to_vector();
            for i in 0..6 {
                variance[i] += (v[i] - mean[i]).powi(2);
            }
        }
        for v in &mut variance {
            *v /= n as f64;
        }
        WrenchStats {
            samples: n,
            mean_abs,
            variance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub seed: u64,
    pub success: bool,
    pub termination: Termination,
    pub steps: usize,
    pub completion_fraction: f64,
    pub grasped: bool,
    /// Statistics over contact-phase ticks.
    pub contact: WrenchStats,
}

/// Wrench metrics: per-trial statistics averaged over grasp-successful trials.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WrenchMetrics {
    pub trials: usize,
    pub mean_abs: [f64; 6],
    pub variance: [f64; 6],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub wrench: WrenchMetrics,
    pub results: Vec<TrialSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub admittance: bool,
    pub rotation: bool,
    pub tasks: BTreeMap<String, TaskSummary>,
    pub mean_success_rate: f64,
    /// Task metrics averaged over tasks with at least one grasp-successful trial.
    pub wrench: WrenchMetrics,
}

/// Averages per-trial contact statistics over trials that reached contact.
pub fn aggregate_trials(trials: &[TrialSummary]) -> WrenchMetrics {
    let used: Vec<&TrialSummary> = trials.iter().filter(|t| t.grasped && t.contact.samples > 0).collect();
    average_metrics(used.iter().map(|t| (t.contact.mean_abs, t.contact.variance)))
}

/// Averages task metrics over tasks that have data.
pub fn aggregate_tasks<'a>(tasks: impl IntoIterator<Item = &'a WrenchMetrics>) -> WrenchMetrics {
    let used: Vec<&WrenchMetrics> = tasks.into_iter().filter(|m| m.trials > 0).collect();
    let mut m = average_metrics(used.iter().map(|t| (t.mean_abs, t.variance)));
    m.trials = used.iter().map(|t| t.trials).sum();
    m
}

fn average_metrics(items: impl Iterator<Item = ([f64; 6], [f64; 6])>) -> WrenchMetrics {
    let mut out = WrenchMetrics::default();
    let mut n = 0usize;
    for (a, v) in items {
        for i in 0..6 {
            out.mean_abs[i] += a[i];
            out.variance[i] += v[i];
        }
        n += 1;
    }
    if n > 0 {
        for i in 0..6 {
            out.mean_abs[i] /= n as f64;
            out.variance[i] /= n as f64;
        }
    }
    out.trials = n;
    out
}

pub fn summarize_task(results: Vec<TrialSummary>) -> TaskSummary {
    let trials = results.len();
    let successes = results.iter().filter(|r| r.success).count();
    TaskSummary {
        trials,
        successes,
        success_rate: if trials > 0 { successes as f64 / trials as f64 } else { 0.0 },
        wrench: aggregate_trials(&results),
        results,
    }
}

pub fn summarize_arm(admittance: bool, rotation: bool, tasks: BTreeMap<String, TaskSummary>) -> ArmSummary {
    let n = tasks.len().max(1) as f64;
    let mean_success_rate = tasks.values().map(|t| t.success_rate).sum::<f64>() / n;
    let wrench = aggregate_tasks(tasks.values().map(|t| &t.wrench));
    ArmSummary {
        admittance,
        rotation,
        tasks,
        mean_success_rate,
        wrench,
    }
}

/// Ablation arm: which parts of the controller are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arm {
    pub admittance: bool,
    pub rotation: bool,
}

impl Arm {
    pub fn label(&self) -> String {
        let flag = |b: bool| if b { "on" } else { "off" };
        format!("admittance_{}_rotation_{}", flag(self.admittance), flag(self.rotation))
    }
}

/// Everything that defines a batch of rollouts.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSpec {
    pub tasks: Vec<TaskId>,
    pub trials: usize,
    pub arms: Vec<Arm>,
    /// Seeds the initial-pose stream of each trial.
    pub init_seed: u64,
    /// Seeds the featurizer noise stream of each trial.
    pub noise_seed: u64,
    pub noise_std: f64,
    pub init_position_noise: f64,
    pub init_rotation_noise: f64,
    pub max_iter: usize,
    pub task_filter: bool,
    pub params: ControlParams,
    pub objects: BTreeMap<TaskId, ObjectParamsOverride>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            tasks: TaskId::ALL.to_vec(),
            trials: DEFAULT_TRIALS,
            arms: vec![Arm {
                admittance: true,
                rotation: true,
            }],
            init_seed: 0,
            noise_seed: 0,
            noise_std: 0.0,
            init_position_noise: INIT_POSITION_NOISE,
            init_rotation_noise: INIT_ROTATION_NOISE,
            max_iter: DEFAULT_MAX_ITER,
            task_filter: false,
            params: ControlParams::default(),
            objects: BTreeMap::new(),
        }
    }
}

/// Seed of trial `index` of `task`, shared by expert generation and rollouts.
pub fn trial_seed(base: u64, task: TaskId, index: usize) -> u64 {
    let mix = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((task as u64 + 1) << 40)
        .wrapping_add(index as u64);
    mix ^ (mix >> 29)
}

/// Object for `task` with run-level parameter overrides applied.
pub fn task_object(task: TaskId, overrides: &BTreeMap<TaskId, ObjectParamsOverride>) -> ArticulatedObject {
    let mut object = ArticulatedObject::for_task(task);
    if let Some(o) = overrides.get(&task) {
        object.params = object.params.with_override(o);
    }
    object
}

/// Start state of trial `index`: pregrasp pose perturbed by the init-pose stream.
pub fn initial_world(
    model: &RobotModel,
    task: TaskId,
    object: ArticulatedObject,
    init_seed: u64,
    index: usize,
    pos_noise: f64,
    rot_noise: f64,
) -> Result<WorldState> {
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(init_seed, task, index));
    sample_initial_world(model, task, object, &mut rng, pos_noise, rot_noise)
}

/// Result of one trial with its full trace.
#[derive(Clone, Debug)]
pub struct TrialRun {
    pub arm: Arm,
    pub task: TaskId,
    pub summary: TrialSummary,
    pub trace: Vec<TickRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub arms: BTreeMap<String, ArmSummary>,
}

/// Runs every (arm, task, trial) combination. Trials of different arms share
/// initial states and noise streams, so arms are compared pairwise.
pub fn evaluate(
    spec: &EvalSpec,
    ds: &ExpertDataset,
    model: &RobotModel,
    featurizer: &Featurizer,
) -> Result<(EvalSummary, Vec<TrialRun>)> {
    let jobs: Vec<(Arm, TaskId, usize)> = spec
        .arms
        .iter()
        .flat_map(|&arm| {
            spec.tasks
                .iter()
                .flat_map(move |&task| (0..spec.trials).map(move |i| (arm, task, i)))
        })
        .collect();
    let runs: Vec<Result<TrialRun>> = jobs
        .par_iter()
        .map(|&(arm, task, index)| {
            let object = task_object(task, &spec.objects);
            let world = initial_world(
                model,
                task,
                object,
                spec.init_seed,
                index,
                spec.init_position_noise,
                spec.init_rotation_noise,
            )?;
            let seed = trial_seed(spec.noise_seed, task, index);
            let cfg = RolloutConfig {
                task,
                max_iter: spec.max_iter,
                admittance_enabled: arm.admittance,
                rotation_enabled: arm.rotation,
                seed,
                noise_std: spec.noise_std,
                task_filter: spec.task_filter,
            };
            let r = run(&cfg, &spec.params, ds, model, featurizer, world)?;
            let summary = TrialSummary {
                trial: index,
                seed,
                success: r.success,
                termination: r.termination,
                steps: r.steps,
                completion_fraction: r.completion_fraction,
                grasped: r.grasped,
                contact: WrenchStats::from_samples(&r.contact_wrenches()),
            };
            Ok(TrialRun {
                arm,
                task,
                summary,
                trace: r.trace,
            })
        })
        .collect();
    let runs: Vec<TrialRun> = runs.into_iter().collect::<Result<_>>()?;

    let mut arms = BTreeMap::new();
    for arm in &spec.arms {
        let mut tasks = BTreeMap::new();
        for task in &spec.tasks {
            let results: Vec<TrialSummary> = runs
                .iter()
                .filter(|r| r.arm == *arm && r.task == *task)
                .map(|r| r.summary.clone())
                .collect();
            tasks.insert(task.name().to_string(), summarize_task(results));
        }
        arms.insert(arm.label(), summarize_arm(arm.admittance, arm.rotation, tasks));
    }
    Ok((EvalSummary { arms }, runs))
}

/// Settings for recording expert demonstrations.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertGenSpec {
    pub tasks: Vec<TaskId>,
    pub episodes: usize,
    pub init_seed: u64,
    pub init_position_noise: f64,
    pub init_rotation_noise: f64,
    pub max_ticks: usize,
    pub wbc: WbcConfig,
    pub thresholds: ResampleThresholds,
    pub objects: BTreeMap<TaskId, ObjectParamsOverride>,
}

impl Default for ExpertGenSpec {
    fn default() -> Self {
        ExpertGenSpec {
            tasks: TaskId::ALL.to_vec(),
            episodes: DEFAULT_EPISODES,
            init_seed: 0,
            init_position_noise: INIT_POSITION_NOISE,
            init_rotation_noise: INIT_ROTATION_NOISE,
            max_ticks: 400,
            wbc: WbcConfig::default(),
            thresholds: ResampleThresholds::default(),
            objects: BTreeMap::new(),
        }
    }
}

pub const DEFAULT_EPISODES: usize = 30;

/// Records `episodes` scripted demonstrations per task and resamples them into
/// a dataset. Episode `i` of a task starts from the same state as rollout trial `i`.
pub fn generate_expert_dataset(spec: &ExpertGenSpec, model: &RobotModel, featurizer: &Featurizer) -> Result<ExpertDataset> {
    let jobs: Vec<(usize, TaskId, usize)> = spec
        .tasks
        .iter()
        .enumerate()
        .flat_map(|(ti, &task)| (0..spec.episodes).map(move |i| (ti, task, i)))
        .collect();
    let parts: Vec<Result<Vec<ExpertFrame>>> = jobs
        .par_iter()
        .map(|&(ti, task, index)| {
            let object = task_object(task, &spec.objects);
            let start = initial_world(
                model,
                task,
                object,
                spec.init_seed,
                index,
                spec.init_position_noise,
                spec.init_rotation_noise,
            )?;
            let (raw, end) = record_expert_episode(model, start, &spec.wbc, featurizer, spec.max_ticks)?;
            if end.object.completion_fraction() < SUCCESS_FRACTION {
                return Err(Error::InvalidTrajectory {
                    traj: format!("{task}/{index}"),
                    reason: format!("expert reached only {:.2} of the joint range", end.object.completion_fraction()),
                });
            }
            let steps = resample(&raw, &spec.thresholds)?;
            let traj_id = (ti * spec.episodes + index) as u64;
            Ok(to_frames(task.name(), traj_id, steps))
        })
        .collect();
    let mut frames = Vec::new();
    for p in parts {
        frames.extend(p?);
    }
    ExpertDataset::new(frames)
}
