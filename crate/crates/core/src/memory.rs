//! Expert frames, resampling of raw demonstrations, JSONL storage and
//! nearest-neighbour retrieval by cosine similarity.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::admittance::Wrench;
use crate::error::{Error, Result};
use crate::geom::{Pose, RotVec, Vec3};

/// Embeddings with a smaller norm are rejected.
pub const MIN_EMBEDDING_NORM: f64 = 1e-9;
const IDENTITY_TOL: f64 = 1e-12;

pub const GRIPPER_OPEN: i8 = 1;
pub const GRIPPER_CLOSE: i8 = -1;
pub const GRIPPER_NONE: i8 = 0;

/// One resampled step of a demonstration.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertFrame {
    pub task: String,
    pub traj_id: u64,
    pub step: usize,
    pub embedding: Vec<f64>,
    /// Relative transform from this frame's pose to the next frame's.
    pub action: Pose,
    pub gripper: i8,
    pub wrench: Wrench,
    pub terminate: bool,
}

/// Frames grouped by trajectory, in file order.
#[derive(Clone, Debug, Default)]
pub struct ExpertDataset {
    frames: Vec<ExpertFrame>,
    norms: Vec<f64>,
    embedding_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub action: Pose,
    pub gripper: i8,
    pub target_wrench: Wrench,
    pub terminate: bool,
    pub matched_index: usize,
    pub similarity: f64,
}

/// One line of the dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    task: String,
    traj: u64,
    step: usize,
    z: Vec<f64>,
    a_t: [f64; 3],
    a_r: [f64; 3],
    g: i8,
    #[serde(rename = "F")]
    wrench: Wrench,
    #[serde(rename = "T")]
    terminate: u8,
}

impl From<&ExpertFrame> for FrameRecord {
    fn from(f: &ExpertFrame) -> Self {
        let r = f.action.rotvec().0;
        FrameRecord {
            task: f.task.clone(),
            traj: f.traj_id,
            step: f.step,
            z: f.embedding.clone(),
            a_t: [f.action.trans.x, f.action.trans.y, f.action.trans.z],
            a_r: [r.x, r.y, r.z],
            g: f.gripper,
            wrench: f.wrench,
            terminate: u8::from(f.terminate),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity `aᵀb / (‖a‖‖b‖)`.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na > MIN_EMBEDDING_NORM && nb > MIN_EMBEDDING_NORM) {
        return Err(Error::ZeroEmbedding);
    }
    Ok(dot(a, b) / (na * nb))
}

impl ExpertDataset {
    /// Validates and indexes `frames`.
    pub fn new(frames: Vec<ExpertFrame>) -> Result<Self> {
        let mut v = Validator::default();
        for f in &frames {
            v.push(f)?;
        }
        v.finish()?;
        Ok(ExpertDataset {
            norms: frames.iter().map(|f| norm(&f.embedding)).collect(),
            embedding_dim: v.dim.unwrap_or(0),
            frames,
        })
    }

    pub fn frames(&self) -> &[ExpertFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn trajectory_count(&self) -> usize {
        self.frames.iter().filter(|f| f.step == 0).count()
    }

    pub fn tasks(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for f in &self.frames {
            if !out.contains(&f.task) {
                out.push(f.task.clone());
            }
        }
        out
    }

    /// Frames belonging to `task`, as a new dataset.
    pub fn filtered(&self, task: &str) -> Result<Self> {
        let frames: Vec<ExpertFrame> = self.frames.iter().filter(|f| f.task == task).cloned().collect();
        ExpertDataset::new(frames)
    }

    /// Concatenates datasets with matching embedding dimension.
    pub fn concat(parts: Vec<ExpertDataset>) -> Result<Self> {
        ExpertDataset::new(parts.into_iter().flat_map(|d| d.frames).collect())
    }

    pub fn from_reader(reader: impl BufRead, source: &str) -> Result<Self> {
        let mut frames = Vec::new();
        let mut validator = Validator::default();
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io(source, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let at = |reason: String| Error::Dataset {
                path: source.to_string(),
                line: lineno,
                reason,
            };
            let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
            if rec.terminate > 1 {
                return Err(at(format!("T must be 0 or 1, got {}", rec.terminate)));
            }
            let action = Pose::from_parts(Vec3::from(rec.a_t), RotVec(Vec3::from(rec.a_r)));
            frames.push(ExpertFrame {
                task: rec.task,
                traj_id: rec.traj,
                step: rec.step,
                embedding: rec.z,
                action,
                gripper: rec.g,
                wrench: rec.wrench,
                terminate: rec.terminate == 1,
            });
            validator.push(frames.last().expect("just pushed")).map_err(|e| at(e.to_string()))?;
        }
        validator.finish().map_err(|e| Error::Dataset {
            path: source.to_string(),
            line: frames.len(),
            reason: e.to_string(),
        })?;
        ExpertDataset::new(frames)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file), &path.display().to_string())
    }

    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        for f in &self.frames {
            serde_json::to_writer(&mut *out, &FrameRecord::from(f))?;
            out.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Exhaustive argmax of cosine similarity; ties go to the lowest index.
    pub fn retrieve(&self, query: &[f64]) -> Result<Prediction> {
        self.retrieve_where(query, |_| true)
    }

    /// As [`retrieve`](Self::retrieve), restricted to frames of `task`.
    pub fn retrieve_for_task(&self, query: &[f64], task: &str) -> Result<Prediction> {
        self.retrieve_where(query, |f| f.task == task)
    }

    fn retrieve_where(&self, query: &[f64], keep: impl Fn(&ExpertFrame) -> bool) -> Result<Prediction> {
        if query.len() != self.embedding_dim {
            return Err(Error::DimensionMismatch {
                expected: self.embedding_dim,
                got: query.len(),
            });
        }
        let qn = norm(query);
        if !(qn > MIN_EMBEDDING_NORM) {
            return Err(Error::ZeroEmbedding);
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, f) in self.frames.iter().enumerate() {
            if !keep(f) {
                continue;
            }
            let s = dot(query, &f.embedding) / (qn * self.norms[i]);
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        let (idx, sim) = best.ok_or(Error::EmptyDataset)?;
        let f = &self.frames[idx];
        let next_wrench = match self.frames.get(idx + 1) {
            Some(n) if !f.terminate && n.task == f.task && n.traj_id == f.traj_id => n.wrench,
            _ => f.wrench,
        };
        Ok(Prediction {
            action: f.action,
            gripper: f.gripper,
            target_wrench: next_wrench,
            terminate: f.terminate,
            matched_index: idx,
            similarity: sim,
        })
    }
}

fn is_identity(p: &Pose) -> bool {
    p.trans.amax() <= IDENTITY_TOL && p.rot.angle() <= IDENTITY_TOL
}

/// Frame-by-frame invariant checks, so loaders can report the offending line.
#[derive(Default)]
struct Validator {
    dim: Option<usize>,
    prev: Option<(String, u64, usize, bool)>,
    seen: HashSet<(String, u64)>,
}

impl Validator {
    fn push(&mut self, f: &ExpertFrame) -> Result<()> {
        let bad = |reason: String| Error::InvalidTrajectory {
            traj: format!("{}/{}", f.task, f.traj_id),
            reason,
        };
        let dim = *self.dim.get_or_insert(f.embedding.len());
        if f.embedding.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: f.embedding.len(),
            });
        }
        let n = norm(&f.embedding);
        if !(n > MIN_EMBEDDING_NORM && n.is_finite()) {
            return Err(Error::ZeroEmbedding);
        }
        if ![GRIPPER_CLOSE, GRIPPER_NONE, GRIPPER_OPEN].contains(&f.gripper) {
            return Err(bad(format!("gripper value {} at step {}", f.gripper, f.step)));
        }
        if f.gripper != GRIPPER_NONE && !is_identity(&f.action) {
            return Err(bad(format!("gripper frame at step {} carries a motion", f.step)));
        }
        if !f.wrench.is_finite() {
            return Err(bad(format!("non-finite wrench at step {}", f.step)));
        }
        match &self.prev {
            Some((task, traj, step, terminal)) if *task == f.task && *traj == f.traj_id => {
                if *terminal {
                    return Err(bad(format!("frame after terminal step {step}")));
                }
                if f.step != step + 1 {
                    return Err(bad(format!("step {} follows step {step}", f.step)));
                }
            }
            prev => {
                if let Some((task, traj, _, false)) = prev {
                    return Err(Error::InvalidTrajectory {
                        traj: format!("{task}/{traj}"),
                        reason: "last frame is not terminal".into(),
                    });
                }
                if !self.seen.insert((f.task.clone(), f.traj_id)) {
                    return Err(bad("trajectory frames are not contiguous".into()));
                }
                if f.step != 0 {
                    return Err(bad(format!("first step is {}", f.step)));
                }
            }
        }
        self.prev = Some((f.task.clone(), f.traj_id, f.step, f.terminate));
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        match &self.prev {
            None => Err(Error::EmptyDataset),
            Some((task, traj, _, false)) => Err(Error::InvalidTrajectory {
                traj: format!("{task}/{traj}"),
                reason: "last frame is not terminal".into(),
            }),
            Some(_) => Ok(()),
        }
    }
}

/// A recorded demonstration sample before resampling.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFrame {
    pub pose: Pose,
    /// Gripper state after this sample's command.
    pub gripper_closed: bool,
    pub wrench: Wrench,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResampleThresholds {
    pub translation: f64,
    pub rotation: f64,
    pub static_translation: f64,
    pub static_rotation: f64,
}

impl Default for ResampleThresholds {
    fn default() -> Self {
        ResampleThresholds {
            translation: 0.01,
            rotation: 0.1,
            static_translation: 1e-4,
            static_rotation: 1e-3,
        }
    }
}

/// A resampled step without trajectory bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct ResampledStep {
    /// Index into the raw trajectory.
    pub raw_index: usize,
    /// Raw frames spanned by the action (0 for gripper and terminal frames).
    pub span: usize,
    pub embedding: Vec<f64>,
    pub action: Pose,
    pub gripper: i8,
    pub wrench: Wrench,
    pub terminate: bool,
}

/// Turns a raw demonstration into frames whose actions exceed the thresholds.
///
/// Static samples are dropped, except where the gripper changes. From each
/// emitted frame the look-ahead grows until translation or rotation exceeds
/// its threshold or the gripper changes; the frame reached is emitted next.
/// A look-ahead cut short by a gripper change or the end of the demonstration
/// is merged into the preceding motion frame. A gripper change is emitted as
/// its own frame with identity action.
pub fn resample(raw: &[RawFrame], th: &ResampleThresholds) -> Result<Vec<ResampledStep>> {
    let reject = |reason: &str| Error::InvalidTrajectory {
        traj: "<raw>".into(),
        reason: reason.into(),
    };
    if raw.len() < 2 {
        return Err(reject("fewer than 2 raw frames"));
    }
    let changes = |i: usize| i > 0 && raw[i].gripper_closed != raw[i - 1].gripper_closed;
    let kept: Vec<usize> = (0..raw.len())
        .filter(|&i| {
            if i + 1 == raw.len() || changes(i) {
                return true;
            }
            let (dp, dr) = raw[i].pose.distance_to(&raw[i + 1].pose);
            !(dp < th.static_translation && dr < th.static_rotation)
        })
        .collect();
    if kept.len() < 2 {
        return Err(reject("fewer than 2 frames after static filtering"));
    }

    let mut out = Vec::new();
    let mut k = 0;
    while k < kept.len() {
        let i = kept[k];
        let f = &raw[i];
        let is_last = k + 1 == kept.len();
        if changes(i) {
            let gripper = if f.gripper_closed { GRIPPER_CLOSE } else { GRIPPER_OPEN };
            out.push(ResampledStep {
                raw_index: i,
                span: 0,
                embedding: f.embedding.clone(),
                action: Pose::identity(),
                gripper,
                wrench: f.wrench,
                terminate: false,
            });
            if is_last {
                break;
            }
            k += 1;
            continue;
        }
        if is_last {
            out.push(ResampledStep {
                raw_index: i,
                span: 0,
                embedding: f.embedding.clone(),
                action: Pose::identity(),
                gripper: GRIPPER_NONE,
                wrench: f.wrench,
                terminate: true,
            });
            break;
        }
        let mut n = 1;
        while k + n + 1 < kept.len() {
            let j = kept[k + n];
            let (dp, dr) = f.pose.distance_to(&raw[j].pose);
            if dp > th.translation || dr > th.rotation || changes(j) {
                break;
            }
            n += 1;
        }
        let j = kept[k + n];
        let (dp, dr) = f.pose.distance_to(&raw[j].pose);
        let short = !(dp > th.translation || dr > th.rotation);
        match out.last_mut() {
            // a short tail before a gripper change or the end extends the previous motion
            Some(prev) if short && prev.gripper == GRIPPER_NONE => {
                prev.action = raw[prev.raw_index].pose.inverse().compose(&raw[j].pose);
                prev.span = j - prev.raw_index;
            }
            _ => out.push(ResampledStep {
                raw_index: i,
                span: j - i,
                embedding: f.embedding.clone(),
                action: f.pose.inverse().compose(&raw[j].pose),
                gripper: GRIPPER_NONE,
                wrench: f.wrench,
                terminate: false,
            }),
        }
        k += n;
    }
    if let Some(last) = out.last_mut() {
        if !last.terminate {
            // trajectory ends on a gripper change: close it with a terminal frame
            let f = &raw[*kept.last().expect("nonempty")];
            out.push(ResampledStep {
                raw_index: kept[kept.len() - 1],
                span: 0,
                embedding: f.embedding.clone(),
                action: Pose::identity(),
                gripper: GRIPPER_NONE,
                wrench: f.wrench,
                terminate: true,
            });
        }
    }
    Ok(out)
}

/// Labels resampled steps with their task and trajectory.
pub fn to_frames(task: &str, traj_id: u64, steps: Vec<ResampledStep>) -> Vec<ExpertFrame> {
    steps
        .into_iter()
        .enumerate()
        .map(|(step, s)| ExpertFrame {
            task: task.to_string(),
            traj_id,
            step,
            embedding: s.embedding,
            action: s.action,
            gripper: s.gripper,
            wrench: s.wrench,
            terminate: s.terminate,
        })
        .collect()
}
