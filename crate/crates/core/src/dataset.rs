//! Demonstrations, synthetic reach tasks, complementary-action augmentation,
//! chunking and normalization statistics.

use crate::actionspace::{
    dims, pack, unpack, ActionChunk, ActionMask, ActionVector, EefState, HumanHandState,
    NormStats, RobotJointState, Side, UnifiedAction, ACTION_DIM,
};
use crate::geometry::{Pose, Quaternion, Vec3};
use crate::kinematics::{forward_kinematics, solve_trajectory};
use crate::retarget::{human_to_robot, robot_to_human, RetargetConfig, RetargetError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const DATASET_MAGIC: &[u8; 8] = b"XMIMDS\0\n";
pub const DATASET_VERSION: u32 = 1;
/// Task names indexed by instruction id.
pub const TASK_NAMES: [&str; 2] = ["reach_right", "reach_left"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("task unreachable: {0}")]
    TaskUnreachable(String),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("dataset version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("dataset file is truncated")]
    TruncatedFile,
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Retarget(#[from] RetargetError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Embodiment {
    Human,
    Robot,
}

impl Embodiment {
    pub fn name(self) -> &'static str {
        match self {
            Embodiment::Human => "human",
            Embodiment::Robot => "robot",
        }
    }

    /// Dims this embodiment labels natively on the given sides.
    pub fn native_mask(self, sides: &[Side]) -> ActionMask {
        match self {
            Embodiment::Human => ActionMask::human_sides(sides),
            Embodiment::Robot => ActionMask::robot_sides(sides),
        }
    }

    fn code(self) -> u8 {
        match self {
            Embodiment::Human => 0,
            Embodiment::Robot => 1,
        }
    }
}

impl std::fmt::Display for Embodiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One time step: observation (scene, proprioception) and next-state label.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub scene: Vec<f64>,
    pub proprio: ActionVector,
    pub proprio_mask: ActionMask,
    pub label: ActionVector,
    pub label_mask: ActionMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub id: u32,
    pub embodiment: Embodiment,
    pub instruction_id: u32,
    pub steps: Vec<Step>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Sides carrying native labels.
    pub fn active_sides(&self) -> Vec<Side> {
        let Some(first) = self.steps.first() else {
            return Vec::new();
        };
        Side::BOTH
            .into_iter()
            .filter(|&s| first.label_mask.any_in(native_range(self.embodiment, s)))
            .collect()
    }
}

fn native_range(e: Embodiment, side: Side) -> std::ops::Range<usize> {
    match e {
        Embodiment::Human => dims::fingertips(side),
        Embodiment::Robot => dims::joints(side),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub demo_id: u32,
    pub start: usize,
    pub instruction_id: u32,
    pub scene: Vec<f64>,
    pub proprio: ActionVector,
    pub proprio_mask: ActionMask,
    pub target: ActionChunk,
    pub source: Embodiment,
}

/// Scripted reach: the acting arm moves from its home pose to a goal a
/// fixed offset from a sampled object, turning with the offset, with the
/// gripper closing over the final part of the motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReachTaskConfig {
    /// Transitions per demonstration.
    pub steps: usize,
    /// Object offset box relative to the acting arm's home end effector (m).
    pub object_min: [f64; 3],
    pub object_max: [f64; 3],
    /// Goal = object + goal_offset.
    pub goal_offset: [f64; 3],
    /// Gains (rad/m) turning the object offset `d` into the final rotation
    /// vector `(g[1]·d.y, g[2]·d.z, g[0]·d.x)` about the base axes.
    pub rotation_gain: [f64; 3],
    /// Fraction of the motion after which the gripper starts closing.
    pub grip_start: f64,
    /// Redraws allowed when a sampled goal fails IK.
    pub max_redraws: usize,
}

impl Default for ReachTaskConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            object_min: [0.0, -0.12, -0.10],
            object_max: [0.15, 0.12, 0.05],
            goal_offset: [0.0, 0.0, 0.02],
            rotation_gain: [2.0, 2.5, 2.5],
            grip_start: 0.6,
            max_redraws: 20,
        }
    }
}

impl ReachTaskConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.steps == 0 {
            return Err(DatasetError::InvalidArgument("task steps must be >= 1".into()));
        }
        if (0..3).any(|i| !(self.object_min[i] <= self.object_max[i])) {
            return Err(DatasetError::InvalidArgument(
                "object_min must not exceed object_max".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.grip_start) {
            return Err(DatasetError::InvalidArgument("grip_start must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Task side for an instruction id.
pub fn task_side(instruction_id: u32) -> Side {
    if instruction_id == 0 {
        Side::Right
    } else {
        Side::Left
    }
}

pub fn min_jerk(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

/// Sampled reach episode in the robot frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachEpisode {
    pub instruction_id: u32,
    pub object: Vec3,
    pub goal: Vec3,
    /// `steps + 1` poses of the acting end effector and its gripper values.
    pub path: Vec<Pose>,
    pub gripper: Vec<f64>,
}

impl ReachEpisode {
    pub fn side(&self) -> Side {
        task_side(self.instruction_id)
    }

    pub fn scene(&self) -> Vec<f64> {
        self.object.iter().chain(self.goal.iter()).copied().collect()
    }
}

/// Reach radius of a chain: sum of link lengths from the base.
fn chain_reach(cfg: &RetargetConfig, side: Side) -> (Vec3, f64) {
    let chain = cfg.chain(side);
    let reach = chain
        .joints()
        .iter()
        .map(|j| j.offset.position.norm())
        .sum::<f64>()
        + chain.tool().position.norm();
    (chain.base().position, reach)
}

pub fn sample_episode(
    task: &ReachTaskConfig,
    cfg: &RetargetConfig,
    rng: &mut impl Rng,
) -> Result<ReachEpisode, DatasetError> {
    let instruction_id = rng.random_range(0..TASK_NAMES.len() as u32);
    let side = task_side(instruction_id);
    let home = *cfg.initial_eef.pose(side);
    let offset = Vec3::from_fn(|i, _| {
        let (lo, hi) = (task.object_min[i], task.object_max[i]);
        if lo < hi {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    });
    let object = home.position + offset;
    let goal = object + Vec3::from(task.goal_offset);
    let (base, reach) = chain_reach(cfg, side);
    if (goal - base).norm() > reach {
        return Err(DatasetError::TaskUnreachable(format!(
            "goal {:?} is {:.3} m from the {side} base, beyond its {:.3} m reach",
            goal.as_slice(),
            (goal - base).norm(),
            reach
        )));
    }
    let g = task.rotation_gain;
    let turn = Vec3::new(g[1] * offset.y, g[2] * offset.z, g[0] * offset.x);
    let n = task.steps;
    let mut path = Vec::with_capacity(n + 1);
    let mut gripper = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let tau = k as f64 / n as f64;
        let s = min_jerk(tau);
        let rot = Quaternion::from_rotation_vector(&(s * turn)).mul(&home.orientation);
        path.push(Pose::new(home.position + s * (goal - home.position), rot));
        let g = min_jerk((tau - task.grip_start) / (1.0 - task.grip_start));
        gripper.push(1.0 - g);
    }
    Ok(ReachEpisode {
        instruction_id,
        object,
        goal,
        path,
        gripper,
    })
}

fn demo_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Scripted demonstrations of one embodiment, ids `first_id..first_id + n`.
///
/// Robot demos execute the path through warm-started IK (episodes whose IK
/// fails anywhere are redrawn); human demos drive a synthesized hand along
/// the path mapped into the human frame. Deterministic per `seed`.
pub fn generate_synthetic_demos(
    task: &ReachTaskConfig,
    cfg: &RetargetConfig,
    embodiment: Embodiment,
    n: usize,
    seed: u64,
    first_id: u32,
) -> Result<Vec<Demonstration>, DatasetError> {
    task.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = demo_rng(seed, i as u64 + first_id as u64);
            let id = first_id + i as u32;
            match embodiment {
                Embodiment::Robot => robot_demo(task, cfg, id, &mut rng),
                Embodiment::Human => {
                    let ep = sample_episode(task, cfg, &mut rng)?;
                    human_demo(&ep, cfg, id)
                }
            }
        })
        .collect()
}

/// Robot joint states along an episode, or `None` if IK fails anywhere.
pub fn execute_episode(
    ep: &ReachEpisode,
    cfg: &RetargetConfig,
) -> Result<Option<Vec<RobotJointState>>, DatasetError> {
    let side = ep.side();
    let chain = cfg.chain(side);
    let sols = solve_trajectory(chain, &ep.path, &cfg.home.arm(side).q, &cfg.ik)
        .map_err(RetargetError::from)?;
    if sols.iter().any(|s| !s.converged) {
        return Ok(None);
    }
    Ok(Some(
        sols.iter()
            .zip(&ep.gripper)
            .map(|(s, &g)| {
                let mut state = cfg.home;
                let arm = state.arm_mut(side);
                arm.q = s.q;
                arm.gripper = g;
                state
            })
            .collect(),
    ))
}

/// Draws episodes until one executes through IK at every step.
pub fn sample_feasible_episode(
    task: &ReachTaskConfig,
    cfg: &RetargetConfig,
    rng: &mut impl Rng,
) -> Result<(ReachEpisode, Vec<RobotJointState>), DatasetError> {
    for _ in 0..=task.max_redraws {
        let ep = sample_episode(task, cfg, rng)?;
        if let Some(states) = execute_episode(&ep, cfg)? {
            return Ok((ep, states));
        }
    }
    Err(DatasetError::TaskUnreachable(format!(
        "IK failed on {} consecutive draws",
        task.max_redraws + 1
    )))
}

/// Robot joints plus forward-kinematics end effectors, packed.
pub fn robot_state_vector(j: &RobotJointState, cfg: &RetargetConfig) -> ActionVector {
    let eef = EefState::new(
        forward_kinematics(&cfg.left_chain, &j.left.q),
        forward_kinematics(&cfg.right_chain, &j.right.q),
    );
    pack(&UnifiedAction {
        robot: *j,
        eef,
        ..Default::default()
    })
}

/// Dims a policy predicts for a task: both embodiments on the task's side.
pub fn task_output_mask(instruction_id: u32) -> ActionMask {
    let side = task_side(instruction_id);
    ActionMask::robot(side) | ActionMask::human(side)
}

fn robot_demo(
    task: &ReachTaskConfig,
    cfg: &RetargetConfig,
    id: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Demonstration, DatasetError> {
    let (ep, states) = sample_feasible_episode(task, cfg, rng)
        .map_err(|e| match e {
            DatasetError::TaskUnreachable(m) => DatasetError::TaskUnreachable(format!("demo {id}: {m}")),
            e => e,
        })?;
    let vectors: Vec<ActionVector> = states.iter().map(|j| robot_state_vector(j, cfg)).collect();
    let proprio_mask = ActionMask::robot_sides(&Side::BOTH);
    let label_mask = ActionMask::robot(ep.side());
    Ok(assemble(id, Embodiment::Robot, &ep, ep.scene(), &vectors, proprio_mask, label_mask))
}

/// Human demonstration of an episode: hands synthesized from the path mapped
/// through `r_m`, the idle hand held at home. The scene is mapped into the
/// human frame as well.
pub fn human_demo(ep: &ReachEpisode, cfg: &RetargetConfig, id: u32) -> Result<Demonstration, DatasetError> {
    let side = ep.side();
    let idle_g = cfg.home.arm(side.other()).gripper;
    let eef: Vec<EefState> = ep
        .path
        .iter()
        .map(|p| {
            let mut e = cfg.initial_eef;
            *e.pose_mut(side) = *p;
            e
        })
        .collect();
    let grippers: Vec<[f64; 2]> = ep
        .gripper
        .iter()
        .map(|&g| match side {
            Side::Left => [g, idle_g],
            Side::Right => [idle_g, g],
        })
        .collect();
    let hands = robot_to_human(&eef, &grippers, cfg)?;
    let vectors: Vec<ActionVector> = hands
        .iter()
        .map(|h| {
            pack(&UnifiedAction {
                human: *h,
                ..Default::default()
            })
        })
        .collect();
    let scene: Vec<f64> = [ep.object, ep.goal]
        .iter()
        .flat_map(|p| cfg.r_m.apply_point(p).iter().copied().collect::<Vec<_>>())
        .collect();
    Ok(assemble(
        id,
        Embodiment::Human,
        ep,
        scene,
        &vectors,
        ActionMask::human_sides(&Side::BOTH),
        ActionMask::human(side),
    ))
}

fn assemble(
    id: u32,
    embodiment: Embodiment,
    ep: &ReachEpisode,
    scene: Vec<f64>,
    states: &[ActionVector],
    proprio_mask: ActionMask,
    label_mask: ActionMask,
) -> Demonstration {
    let steps = states
        .windows(2)
        .map(|w| Step {
            scene: scene.clone(),
            proprio: w[0],
            proprio_mask,
            label: w[1],
            label_mask,
        })
        .collect();
    Demonstration {
        id,
        embodiment,
        instruction_id: ep.instruction_id,
        steps,
    }
}

/// Fills the other embodiment's dims of every label by retargeting.
///
/// Robot demos gain hand dims through [`robot_to_human`]; human demos gain
/// arm joint and end-effector dims through [`human_to_robot`], with steps
/// whose IK did not converge left masked out. Native dims are never touched,
/// and running it twice gives the same result as running it once.
pub fn augment_complementary(d: &Demonstration, cfg: &RetargetConfig) -> Result<Demonstration, DatasetError> {
    let mut out = d.clone();
    if d.steps.is_empty() {
        return Ok(out);
    }
    let sides = d.active_sides();
    // State sequence: proprio of step 0 followed by every label.
    let states: Vec<&ActionVector> = std::iter::once(&d.steps[0].proprio)
        .chain(d.steps.iter().map(|s| &s.label))
        .collect();
    match d.embodiment {
        Embodiment::Robot => {
            let mask = ActionMask::robot_sides(&Side::BOTH);
            let mut eef = Vec::with_capacity(states.len());
            let mut grippers = Vec::with_capacity(states.len());
            for v in &states {
                let u = unpack(*v, mask).map_err(|e| DatasetError::Corrupt(e.to_string()))?;
                eef.push(u.eef);
                grippers.push([u.robot.left.gripper, u.robot.right.gripper]);
            }
            let hands = robot_to_human(&eef, &grippers, cfg)?;
            for (step, h) in out.steps.iter_mut().zip(&hands[1..]) {
                let filled = pack(&UnifiedAction {
                    human: *h,
                    ..Default::default()
                });
                for &side in &sides {
                    copy_dims(&mut step.label, &filled, ActionMask::human(side));
                    step.label_mask = step.label_mask | ActionMask::human(side);
                }
            }
        }
        Embodiment::Human => {
            let mask = ActionMask::human_sides(&Side::BOTH);
            let hands: Vec<HumanHandState> = states
                .iter()
                .map(|v| unpack(*v, mask).map(|u| u.human))
                .collect::<Result<_, _>>()
                .map_err(|e| DatasetError::Corrupt(e.to_string()))?;
            let (eef, joints, report) = human_to_robot(&hands, cfg)?;
            for (t, step) in out.steps.iter_mut().enumerate() {
                let filled = pack(&UnifiedAction {
                    robot: joints[t + 1],
                    eef: eef[t + 1],
                    ..Default::default()
                });
                for &side in &sides {
                    let m = ActionMask::robot(side);
                    copy_dims(&mut step.label, &filled, m);
                    if report.converged(t + 1, side) {
                        step.label_mask = step.label_mask | m;
                    } else {
                        for i in 0..ACTION_DIM {
                            if m.get(i) {
                                step.label_mask.set(i, false);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn copy_dims(dst: &mut ActionVector, src: &ActionVector, mask: ActionMask) {
    for i in 0..ACTION_DIM {
        if mask.get(i) {
            dst[i] = src[i];
        }
    }
}

/// One sample per start index `0, stride, 2·stride, …`; rows past the end
/// repeat the final label and are flagged as padding.
pub fn chunk_samples(d: &Demonstration, horizon: usize, stride: usize) -> Vec<TrainingSample> {
    assert!(horizon >= 1 && stride >= 1, "horizon and stride must be >= 1");
    let n = d.steps.len();
    (0..n)
        .step_by(stride)
        .map(|t| {
            let idx: Vec<usize> = (t..t + horizon).map(|i| i.min(n - 1)).collect();
            let target = ActionChunk::new(
                idx.iter().map(|&i| d.steps[i].label).collect(),
                idx.iter().map(|&i| d.steps[i].label_mask).collect(),
                (t..t + horizon).map(|i| i >= n).collect(),
            );
            let s = &d.steps[t];
            TrainingSample {
                demo_id: d.id,
                start: t,
                instruction_id: d.instruction_id,
                scene: s.scene.clone(),
                proprio: s.proprio,
                proprio_mask: s.proprio_mask,
                target,
                source: d.embodiment,
            }
        })
        .collect()
}

/// Per-dim population mean and std over labeled steps; dims never labeled
/// get `(0, 1)`.
pub fn compute_norm_stats(demos: &[Demonstration]) -> NormStats {
    let mut count = [0usize; ACTION_DIM];
    let mut sum = [0.0; ACTION_DIM];
    let labeled = || demos.iter().flat_map(|d| &d.steps);
    for s in labeled() {
        for i in 0..ACTION_DIM {
            if s.label_mask.get(i) {
                count[i] += 1;
                sum[i] += s.label[i];
            }
        }
    }
    let mean: ActionVector = std::array::from_fn(|i| if count[i] > 0 { sum[i] / count[i] as f64 } else { 0.0 });
    let mut sq = [0.0; ACTION_DIM];
    for s in labeled() {
        for i in 0..ACTION_DIM {
            if s.label_mask.get(i) {
                let d = s.label[i] - mean[i];
                sq[i] += d * d;
            }
        }
    }
    let std: ActionVector = std::array::from_fn(|i| {
        if count[i] > 0 {
            (sq[i] / count[i] as f64).sqrt()
        } else {
            1.0
        }
    });
    NormStats::new(mean, std)
}

/// Demos whose id is a multiple of `every` go to the held-out split.
pub fn split_by_demo(demos: &[Demonstration], every: u32) -> (Vec<Demonstration>, Vec<Demonstration>) {
    demos
        .iter()
        .cloned()
        .partition(|d| every == 0 || d.id % every != 0)
}

/// Text header stored after the magic.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub version: u32,
    pub action_dim: usize,
    pub horizon: usize,
    pub tasks: Vec<String>,
    pub demos: usize,
}

impl DatasetHeader {
    pub fn new(horizon: usize, demos: usize) -> Self {
        Self {
            version: DATASET_VERSION,
            action_dim: ACTION_DIM,
            horizon,
            tasks: TASK_NAMES.iter().map(|s| s.to_string()).collect(),
            demos,
        }
    }

    fn to_text(&self) -> String {
        format!(
            "version {}\naction_dim {}\nhorizon {}\ntasks {}\ndemos {}\nend\n",
            self.version,
            self.action_dim,
            self.horizon,
            self.tasks.join(","),
            self.demos
        )
    }
}

/// Serializes demonstrations: magic, text header, then little-endian records.
pub fn encode_dataset(demos: &[Demonstration], horizon: usize) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(DatasetHeader::new(horizon, demos.len()).to_text().as_bytes());
    for d in demos {
        buf.extend_from_slice(&d.id.to_le_bytes());
        buf.push(d.embodiment.code());
        buf.extend_from_slice(&d.instruction_id.to_le_bytes());
        buf.extend_from_slice(&(d.steps.len() as u32).to_le_bytes());
        let scene_len = d.steps.first().map_or(0, |s| s.scene.len());
        buf.extend_from_slice(&(scene_len as u32).to_le_bytes());
        for s in &d.steps {
            debug_assert_eq!(s.scene.len(), scene_len);
            for x in s.scene.iter().chain(&s.proprio) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            buf.extend_from_slice(&s.proprio_mask.to_bytes());
            for x in &s.label {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            buf.extend_from_slice(&s.label_mask.to_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        let end = self.pos.checked_add(n).ok_or(DatasetError::TruncatedFile)?;
        let out = self.buf.get(self.pos..end).ok_or(DatasetError::TruncatedFile)?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s<const N: usize>(&mut self) -> Result<[f64; N], DatasetError> {
        let b = self.take(8 * N)?;
        Ok(std::array::from_fn(|i| f64::from_le_bytes(b[8 * i..8 * i + 8].try_into().unwrap())))
    }

    fn vec_f64(&mut self, n: usize) -> Result<Vec<f64>, DatasetError> {
        let b = self.take(8 * n)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn mask(&mut self) -> Result<ActionMask, DatasetError> {
        ActionMask::from_bytes(self.take(ACTION_DIM)?)
            .ok_or_else(|| DatasetError::Corrupt("mask byte is not 0 or 1".into()))
    }
}

fn parse_header(cur: &mut Cursor<'_>) -> Result<DatasetHeader, DatasetError> {
    let rest = &cur.buf[cur.pos..];
    let end = rest
        .windows(4)
        .position(|w| w == b"end\n")
        .ok_or(DatasetError::TruncatedFile)?;
    let text = std::str::from_utf8(&rest[..end]).map_err(|_| DatasetError::Corrupt("header is not UTF-8".into()))?;
    cur.pos += end + 4;
    let mut version = None;
    let (mut action_dim, mut horizon, mut demos) = (None, None, None);
    let mut tasks = Vec::new();
    for line in text.lines() {
        let (k, v) = line.split_once(' ').unwrap_or((line, ""));
        let num = |v: &str| v.parse::<usize>().map_err(|_| DatasetError::Corrupt(format!("bad header value {k}={v}")));
        match k {
            "version" => version = Some(num(v)? as u32),
            "action_dim" => action_dim = Some(num(v)?),
            "horizon" => horizon = Some(num(v)?),
            "demos" => demos = Some(num(v)?),
            "tasks" => tasks = v.split(',').filter(|s| !s.is_empty()).map(String::from).collect(),
            _ => return Err(DatasetError::Corrupt(format!("unknown header key {k:?}"))),
        }
    }
    let version = version.ok_or_else(|| DatasetError::Corrupt("missing version".into()))?;
    if version != DATASET_VERSION {
        return Err(DatasetError::VersionMismatch {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let missing = |k: &str| DatasetError::Corrupt(format!("missing header key {k}"));
    let header = DatasetHeader {
        version,
        action_dim: action_dim.ok_or_else(|| missing("action_dim"))?,
        horizon: horizon.ok_or_else(|| missing("horizon"))?,
        tasks,
        demos: demos.ok_or_else(|| missing("demos"))?,
    };
    if header.action_dim != ACTION_DIM {
        return Err(DatasetError::Corrupt(format!(
            "action_dim {} does not match {ACTION_DIM}",
            header.action_dim
        )));
    }
    Ok(header)
}

pub fn decode_dataset(buf: &[u8]) -> Result<(DatasetHeader, Vec<Demonstration>), DatasetError> {
    if buf.len() < DATASET_MAGIC.len() {
        return Err(if DATASET_MAGIC.starts_with(buf) && !buf.is_empty() {
            DatasetError::TruncatedFile
        } else {
            DatasetError::BadMagic
        });
    }
    if &buf[..DATASET_MAGIC.len()] != DATASET_MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let mut cur = Cursor {
        buf,
        pos: DATASET_MAGIC.len(),
    };
    let header = parse_header(&mut cur)?;
    let mut demos = Vec::with_capacity(header.demos.min(1 << 16));
    for _ in 0..header.demos {
        let id = cur.u32()?;
        let embodiment = match cur.take(1)?[0] {
            0 => Embodiment::Human,
            1 => Embodiment::Robot,
            b => return Err(DatasetError::Corrupt(format!("unknown embodiment code {b}"))),
        };
        let instruction_id = cur.u32()?;
        let n = cur.u32()? as usize;
        let scene_len = cur.u32()? as usize;
        let mut steps = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let scene = cur.vec_f64(scene_len)?;
            let proprio = cur.f64s::<ACTION_DIM>()?;
            let proprio_mask = cur.mask()?;
            let label = cur.f64s::<ACTION_DIM>()?;
            let label_mask = cur.mask()?;
            steps.push(Step {
                scene,
                proprio,
                proprio_mask,
                label,
                label_mask,
            });
        }
        demos.push(Demonstration {
            id,
            embodiment,
            instruction_id,
            steps,
        });
    }
    if cur.pos != buf.len() {
        return Err(DatasetError::Corrupt(format!(
            "{} trailing bytes after the last record",
            buf.len() - cur.pos
        )));
    }
    Ok((header, demos))
}

pub fn write_dataset(demos: &[Demonstration], horizon: usize, path: &Path) -> Result<(), DatasetError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_dataset(demos, horizon))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Demonstration>), DatasetError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_dataset(&buf)
}

/// `id,embodiment,task,steps` per demo.
pub fn manifest(demos: &[Demonstration]) -> String {
    let mut s = String::from("id,embodiment,task,steps\n");
    for d in demos {
        let task = TASK_NAMES.get(d.instruction_id as usize).copied().unwrap_or("unknown");
        s.push_str(&format!("{},{},{},{}\n", d.id, d.embodiment, task, d.steps.len()));
    }
    s
}
