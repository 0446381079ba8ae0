//! The unified 76-dimensional action vocabulary.
//!
//! Layout (little-endian `f64` on disk, this order everywhere):
//!
//! | range    | content                                                     |
//! |----------|-------------------------------------------------------------|
//! | `0..18`  | wrists: left pos(3) + 6D(6), right pos(3) + 6D(6)           |
//! | `18..48` | fingertips: left thumb..pinky (5×3), right thumb..pinky     |
//! | `48..62` | robot joints: left q(6) + gripper, right q(6) + gripper     |
//! | `62..76` | end effectors: left pos(3) + quat(4), right pos(3) + quat(4)|

use crate::geometry::{GeometryError, Pose, Quaternion, SixDOrientation, Vec3};
use crate::kinematics::{JointVector, NUM_JOINTS};
use serde::{Deserialize, Serialize};
use std::ops::{BitAnd, BitOr, Range};
use thiserror::Error;

pub const HUMAN_DIM: usize = 48;
pub const ROBOT_DIM: usize = 14;
pub const EEF_DIM: usize = 14;
pub const ACTION_DIM: usize = HUMAN_DIM + ROBOT_DIM + EEF_DIM;
const _: () = assert!(ACTION_DIM == 76);

pub const NUM_FINGERS: usize = 5;
pub const FINGER_NAMES: [&str; NUM_FINGERS] = ["thumb", "index", "middle", "ring", "pinky"];

const HUMAN_START: usize = 0;
const ROBOT_START: usize = HUMAN_DIM;
const EEF_START: usize = HUMAN_DIM + ROBOT_DIM;
const WRIST_DIM: usize = 9;
const FINGERS_START: usize = 2 * WRIST_DIM;
const FINGERS_DIM: usize = 3 * NUM_FINGERS;
const ARM_DIM: usize = NUM_JOINTS + 1;
const POSE_DIM: usize = 7;

pub type ActionVector = [f64; ACTION_DIM];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActionSpaceError {
    #[error("expected {expected} values, got {got}")]
    BadLength { expected: usize, got: usize },
    #[error("dimension {dim}: {source}")]
    Degenerate {
        dim: usize,
        #[source]
        source: GeometryError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    pub fn other(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Dimension ranges of each named block.
pub mod dims {
    use super::*;

    pub fn human() -> Range<usize> {
        HUMAN_START..HUMAN_START + HUMAN_DIM
    }
    pub fn robot() -> Range<usize> {
        ROBOT_START..ROBOT_START + ROBOT_DIM
    }
    pub fn eef() -> Range<usize> {
        EEF_START..EEF_START + EEF_DIM
    }
    pub fn wrist(side: Side) -> Range<usize> {
        let s = HUMAN_START + side.index() * WRIST_DIM;
        s..s + WRIST_DIM
    }
    pub fn wrist_sixd(side: Side) -> Range<usize> {
        let s = wrist(side).start + 3;
        s..s + 6
    }
    pub fn fingertips(side: Side) -> Range<usize> {
        let s = HUMAN_START + FINGERS_START + side.index() * FINGERS_DIM;
        s..s + FINGERS_DIM
    }
    pub fn fingertip(side: Side, finger: usize) -> Range<usize> {
        let s = fingertips(side).start + 3 * finger;
        s..s + 3
    }
    pub fn arm(side: Side) -> Range<usize> {
        let s = ROBOT_START + side.index() * ARM_DIM;
        s..s + ARM_DIM
    }
    pub fn joints(side: Side) -> Range<usize> {
        let s = arm(side).start;
        s..s + NUM_JOINTS
    }
    pub fn gripper(side: Side) -> usize {
        arm(side).start + NUM_JOINTS
    }
    pub fn eef_pose(side: Side) -> Range<usize> {
        let s = EEF_START + side.index() * POSE_DIM;
        s..s + POSE_DIM
    }
    pub fn eef_quat(side: Side) -> Range<usize> {
        let s = eef_pose(side).start + 3;
        s..s + 4
    }
    /// All human dims of one hand (wrist and fingertips).
    pub fn hand(side: Side) -> [Range<usize>; 2] {
        [wrist(side), fingertips(side)]
    }
}

/// Column name of dim `i`, e.g. `wrist_l_px`, `tip_r_2_z`, `q_l_3`,
/// `grip_r`, `eef_l_qw`.
pub fn dim_name(i: usize) -> String {
    assert!(i < ACTION_DIM, "dim {i} out of range");
    for side in Side::BOTH {
        let s = &side.name()[..1];
        let w = dims::wrist(side);
        if w.contains(&i) {
            const W: [&str; 9] = ["px", "py", "pz", "r0", "r1", "r2", "r3", "r4", "r5"];
            return format!("wrist_{s}_{}", W[i - w.start]);
        }
        let f = dims::fingertips(side);
        if f.contains(&i) {
            let k = i - f.start;
            return format!("tip_{s}_{}_{}", k / 3, ["x", "y", "z"][k % 3]);
        }
        let j = dims::joints(side);
        if j.contains(&i) {
            return format!("q_{s}_{}", i - j.start);
        }
        if i == dims::gripper(side) {
            return format!("grip_{s}");
        }
        let e = dims::eef_pose(side);
        if e.contains(&i) {
            const E: [&str; 7] = ["px", "py", "pz", "qw", "qx", "qy", "qz"];
            return format!("eef_{s}_{}", E[i - e.start]);
        }
    }
    unreachable!("every dim belongs to a block")
}

/// Trajectory CSV: a header of [`dim_name`]s, then one row per step with
/// unsupervised cells left empty.
pub fn trajectory_to_csv(rows: &[(ActionVector, ActionMask)]) -> String {
    let mut s = (0..ACTION_DIM).map(dim_name).collect::<Vec<_>>().join(",");
    s.push('\n');
    for (v, m) in rows {
        let cells: Vec<String> = (0..ACTION_DIM)
            .map(|i| if m.get(i) { format!("{:?}", v[i]) } else { String::new() })
            .collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn trajectory_from_csv(text: &str) -> Result<Vec<(ActionVector, ActionMask)>, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or("file is empty")?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let want: Vec<String> = (0..ACTION_DIM).map(dim_name).collect();
    if names != want {
        return Err(format!("header must list the {ACTION_DIM} dim names in order"));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != ACTION_DIM {
                return Err(format!("row {}: {} cells, expected {ACTION_DIM}", n + 1, cells.len()));
            }
            let mut v = [0.0; ACTION_DIM];
            let mut m = ActionMask::none();
            for (i, c) in cells.iter().enumerate() {
                if !c.is_empty() {
                    v[i] = c.parse().map_err(|_| format!("row {}: bad number `{c}` in {}", n + 1, want[i]))?;
                    m.set(i, true);
                }
            }
            Ok((v, m))
        })
        .collect()
}

/// Which of the 76 dims carry supervision.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ActionMask([bool; ACTION_DIM]);

impl std::fmt::Debug for ActionMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let bits: String = self.0.iter().map(|b| if *b { '1' } else { '0' }).collect();
        write!(f, "ActionMask({bits})")
    }
}

impl Default for ActionMask {
    fn default() -> Self {
        Self::none()
    }
}

impl ActionMask {
    pub fn none() -> Self {
        Self([false; ACTION_DIM])
    }

    pub fn all() -> Self {
        Self([true; ACTION_DIM])
    }

    pub fn from_bits(bits: [bool; ACTION_DIM]) -> Self {
        Self(bits)
    }

    pub fn bits(&self) -> &[bool; ACTION_DIM] {
        &self.0
    }

    pub fn with_range(mut self, r: Range<usize>, value: bool) -> Self {
        self.0[r].fill(value);
        self
    }

    pub fn human(side: Side) -> Self {
        let [w, f] = dims::hand(side);
        Self::none().with_range(w, true).with_range(f, true)
    }

    /// Joints, gripper and end-effector pose of one arm.
    pub fn robot(side: Side) -> Self {
        Self::none()
            .with_range(dims::arm(side), true)
            .with_range(dims::eef_pose(side), true)
    }

    pub fn human_sides(sides: &[Side]) -> Self {
        sides.iter().fold(Self::none(), |m, s| m | Self::human(*s))
    }

    pub fn robot_sides(sides: &[Side]) -> Self {
        sides.iter().fold(Self::none(), |m, s| m | Self::robot(*s))
    }

    pub fn get(&self, dim: usize) -> bool {
        self.0[dim]
    }

    pub fn set(&mut self, dim: usize, value: bool) {
        self.0[dim] = value;
    }

    pub fn clear_range(&mut self, r: Range<usize>) {
        self.0[r].fill(false);
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn any_in(&self, r: Range<usize>) -> bool {
        self.0[r].iter().any(|b| *b)
    }

    pub fn contains(&self, other: &ActionMask) -> bool {
        self.0.iter().zip(&other.0).all(|(a, b)| *a || !*b)
    }

    pub fn to_bytes(&self) -> [u8; ACTION_DIM] {
        self.0.map(u8::from)
    }

    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        if b.len() != ACTION_DIM || b.iter().any(|v| *v > 1) {
            return None;
        }
        Some(Self(std::array::from_fn(|i| b[i] == 1)))
    }
}

impl BitOr for ActionMask {
    type Output = ActionMask;
    fn bitor(self, rhs: Self) -> Self {
        Self(std::array::from_fn(|i| self.0[i] || rhs.0[i]))
    }
}

impl BitAnd for ActionMask {
    type Output = ActionMask;
    fn bitand(self, rhs: Self) -> Self {
        Self(std::array::from_fn(|i| self.0[i] && rhs.0[i]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WristPose {
    pub position: Vec3,
    pub orientation: SixDOrientation,
}

impl WristPose {
    pub fn from_pose(p: &Pose) -> Self {
        Self {
            position: p.position,
            orientation: SixDOrientation::from_quaternion(&p.orientation),
        }
    }

    pub fn to_pose(&self) -> Result<Pose, GeometryError> {
        Ok(Pose::new(self.position, self.orientation.to_quaternion()?))
    }
}

impl Default for WristPose {
    fn default() -> Self {
        Self {
            position: Vec3::zeros(),
            orientation: SixDOrientation::identity(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HandState {
    pub wrist: WristPose,
    /// Thumb, index, middle, ring, pinky.
    pub fingertips: [Vec3; NUM_FINGERS],
}

/// Bilateral 48-dim human hand state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HumanHandState {
    pub left: HandState,
    pub right: HandState,
}

impl HumanHandState {
    pub fn hand(&self, side: Side) -> &HandState {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    pub fn hand_mut(&mut self, side: Side) -> &mut HandState {
        match side {
            Side::Left => &mut self.left,
            Side::Right => &mut self.right,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmJointState {
    pub q: JointVector,
    /// 0 = closed, 1 = open.
    pub gripper: f64,
}

impl Default for ArmJointState {
    fn default() -> Self {
        Self {
            q: JointVector::zeros(),
            gripper: 1.0,
        }
    }
}

/// Bilateral 14-dim joint state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RobotJointState {
    pub left: ArmJointState,
    pub right: ArmJointState,
}

impl RobotJointState {
    pub fn arm(&self, side: Side) -> &ArmJointState {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    pub fn arm_mut(&mut self, side: Side) -> &mut ArmJointState {
        match side {
            Side::Left => &mut self.left,
            Side::Right => &mut self.right,
        }
    }
}

/// Bilateral 14-dim end-effector state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EefState {
    pub left: Pose,
    pub right: Pose,
}

impl EefState {
    pub fn new(left: Pose, right: Pose) -> Self {
        Self { left, right }
    }

    pub fn pose(&self, side: Side) -> &Pose {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    pub fn pose_mut(&mut self, side: Side) -> &mut Pose {
        match side {
            Side::Left => &mut self.left,
            Side::Right => &mut self.right,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UnifiedAction {
    pub human: HumanHandState,
    pub robot: RobotJointState,
    pub eef: EefState,
    pub mask: ActionMask,
}

fn put3(v: &mut [f64], at: usize, x: &Vec3) {
    v[at..at + 3].copy_from_slice(x.as_slice());
}

fn get3(v: &[f64], at: usize) -> Vec3 {
    Vec3::new(v[at], v[at + 1], v[at + 2])
}

pub fn pack(u: &UnifiedAction) -> ActionVector {
    let mut v = [0.0; ACTION_DIM];
    for side in Side::BOTH {
        let hand = u.human.hand(side);
        let w = dims::wrist(side).start;
        put3(&mut v, w, &hand.wrist.position);
        v[dims::wrist_sixd(side)].copy_from_slice(&hand.wrist.orientation.to_array());
        for (f, tip) in hand.fingertips.iter().enumerate() {
            put3(&mut v, dims::fingertip(side, f).start, tip);
        }

        let arm = u.robot.arm(side);
        v[dims::joints(side)].copy_from_slice(arm.q.as_slice());
        v[dims::gripper(side)] = arm.gripper;

        let pose = u.eef.pose(side);
        put3(&mut v, dims::eef_pose(side).start, &pose.position);
        v[dims::eef_quat(side)].copy_from_slice(&pose.orientation.to_array());
    }
    v
}

/// Inverse of [`pack`]. Quaternions are renormalized and sign-canonicalized;
/// a degenerate rotation block is an error on supervised dims and is
/// replaced by the identity on masked ones.
pub fn unpack(v: &[f64], mask: ActionMask) -> Result<UnifiedAction, ActionSpaceError> {
    if v.len() != ACTION_DIM {
        return Err(ActionSpaceError::BadLength {
            expected: ACTION_DIM,
            got: v.len(),
        });
    }
    let mut u = UnifiedAction {
        mask,
        ..Default::default()
    };
    for side in Side::BOTH {
        let sixd_dims = dims::wrist_sixd(side);
        let sixd = SixDOrientation::from_slice(&v[sixd_dims.clone()]);
        let sixd = match crate::geometry::sixd_to_matrix(&sixd) {
            Ok(_) => sixd,
            Err(_) if !mask.any_in(sixd_dims.clone()) => SixDOrientation::identity(),
            Err(source) => {
                return Err(ActionSpaceError::Degenerate {
                    dim: sixd_dims.start,
                    source,
                })
            }
        };
        let hand = u.human.hand_mut(side);
        hand.wrist = WristPose {
            position: get3(v, dims::wrist(side).start),
            orientation: sixd,
        };
        for f in 0..NUM_FINGERS {
            hand.fingertips[f] = get3(v, dims::fingertip(side, f).start);
        }

        let arm = u.robot.arm_mut(side);
        arm.q = JointVector::from_slice(&v[dims::joints(side)]);
        arm.gripper = v[dims::gripper(side)];

        let qd = dims::eef_quat(side);
        let orientation = match Quaternion::new(v[qd.start], v[qd.start + 1], v[qd.start + 2], v[qd.start + 3]) {
            Ok(q) => q,
            Err(_) if !mask.any_in(qd.clone()) => Quaternion::IDENTITY,
            Err(source) => return Err(ActionSpaceError::Degenerate { dim: qd.start, source }),
        };
        *u.eef.pose_mut(side) = Pose::new(get3(v, dims::eef_pose(side).start), orientation);
    }
    Ok(u)
}

/// Restores the invariants of a raw (e.g. sampled) vector in place:
/// quaternion blocks normalized with canonical sign, 6D blocks
/// re-orthonormalized, grippers clamped to `[0, 1]`.
pub fn canonicalize(v: &mut ActionVector) {
    for side in Side::BOTH {
        let qd = dims::eef_quat(side);
        let q = crate::geometry::quat_normalize([v[qd.start], v[qd.start + 1], v[qd.start + 2], v[qd.start + 3]])
            .unwrap_or(Quaternion::IDENTITY);
        v[qd].copy_from_slice(&q.to_array());

        let sd = dims::wrist_sixd(side);
        let r = SixDOrientation::from_slice(&v[sd.clone()])
            .canonical()
            .unwrap_or_else(|_| SixDOrientation::identity());
        v[sd].copy_from_slice(&r.to_array());

        let g = dims::gripper(side);
        v[g] = if v[g].is_finite() { v[g].clamp(0.0, 1.0) } else { 1.0 };
    }
}

/// Thumb reference point: the thumb fingertip shifted by `offset`, which is
/// expressed in the wrist frame; the orientation is the wrist orientation.
pub fn thumb_reference(h: &HumanHandState, side: Side, offset: &Vec3) -> Result<Pose, GeometryError> {
    let hand = h.hand(side);
    let rot = hand.wrist.orientation.to_quaternion()?;
    Ok(Pose::new(hand.fingertips[0] + rot.rotate(offset), rot))
}

/// Default wrist-frame offset from the thumb fingertip to the reference
/// point: 3 cm back toward the wrist (−z in the hand frame).
pub const DEFAULT_THUMB_OFFSET: [f64; 3] = [0.0, 0.0, -0.03];

/// H consecutive unified action vectors sharing one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub rows: Vec<ActionVector>,
    pub masks: Vec<ActionMask>,
    /// Rows past the end of the source trajectory (copies of its last step).
    pub padded: Vec<bool>,
}

impl ActionChunk {
    pub fn new(rows: Vec<ActionVector>, masks: Vec<ActionMask>, padded: Vec<bool>) -> Self {
        assert!(!rows.is_empty(), "a chunk needs at least one row");
        assert_eq!(rows.len(), masks.len());
        assert_eq!(rows.len(), padded.len());
        Self {
            rows,
            masks,
            padded,
        }
    }

    pub fn horizon(&self) -> usize {
        self.rows.len()
    }

    pub fn row_action(&self, i: usize) -> Result<UnifiedAction, ActionSpaceError> {
        unpack(&self.rows[i], self.masks[i])
    }
}

pub const STD_FLOOR: f64 = 1e-6;

/// Per-dimension mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: ActionVector,
    pub std: ActionVector,
}

impl Default for NormStats {
    fn default() -> Self {
        Self::identity()
    }
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; ACTION_DIM],
            std: [1.0; ACTION_DIM],
        }
    }

    pub fn new(mean: ActionVector, std: ActionVector) -> Self {
        Self {
            mean,
            std: std.map(|s| if s.is_finite() { s.max(STD_FLOOR) } else { 1.0 }),
        }
    }

    pub fn normalize(&self, v: &ActionVector) -> ActionVector {
        std::array::from_fn(|i| (v[i] - self.mean[i]) / self.std[i])
    }

    pub fn denormalize(&self, v: &ActionVector) -> ActionVector {
        std::array::from_fn(|i| v[i] * self.std[i] + self.mean[i])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("dim,mean,std\n");
        for i in 0..ACTION_DIM {
            s.push_str(&format!("{i},{:e},{:e}\n", self.mean[i], self.std[i]));
        }
        s
    }

    pub fn from_csv(text: &str) -> Option<Self> {
        let mut mean = [0.0; ACTION_DIM];
        let mut std = [1.0; ACTION_DIM];
        let mut seen = 0;
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split(',');
            let i: usize = parts.next()?.trim().parse().ok()?;
            if i >= ACTION_DIM {
                return None;
            }
            mean[i] = parts.next()?.trim().parse().ok()?;
            std[i] = parts.next()?.trim().parse().ok()?;
            seen += 1;
        }
        (seen == ACTION_DIM).then(|| Self::new(mean, std))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_csv_round_trips() {
        let mut m = ActionMask::robot(Side::Left);
        m.set(3, true);
        let v: ActionVector = std::array::from_fn(|i| i as f64 / 7.0 - 1e-300);
        let rows = vec![(v, m), (v, ActionMask::all())];
        let text = trajectory_to_csv(&rows);
        let back = trajectory_from_csv(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].1, m);
        for i in 0..ACTION_DIM {
            assert_eq!(back[1].0[i], v[i]);
        }
        assert!(trajectory_from_csv("").is_err());
    }

    #[test]
    fn dim_names_are_unique() {
        let names: std::collections::HashSet<String> = (0..ACTION_DIM).map(dim_name).collect();
        assert_eq!(names.len(), ACTION_DIM);
        assert_eq!(dim_name(dims::gripper(Side::Right)), "grip_r");
        assert_eq!(dim_name(dims::eef_quat(Side::Left).start), "eef_l_qw");
    }
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn block_ranges_tile_the_vector() {
        let mut seen = [0u8; ACTION_DIM];
        for side in Side::BOTH {
            for r in [dims::wrist(side), dims::fingertips(side), dims::arm(side), dims::eef_pose(side)] {
                for i in r {
                    seen[i] += 1;
                }
            }
        }
        assert!(seen.iter().all(|c| *c == 1));
        assert_eq!(dims::human().len() + dims::robot().len() + dims::eef().len(), ACTION_DIM);
        assert_eq!(ActionMask::human_sides(&Side::BOTH).count(), HUMAN_DIM);
        assert_eq!(ActionMask::robot_sides(&Side::BOTH).count(), ROBOT_DIM + EEF_DIM);
    }

    #[test]
    fn identity_state_packs_to_known_pattern() {
        let v = pack(&UnifiedAction::default());
        for side in Side::BOTH {
            assert_eq!(&v[dims::wrist_sixd(side)], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
            assert_eq!(&v[dims::eef_quat(side)], &[1.0, 0.0, 0.0, 0.0]);
            assert_eq!(v[dims::gripper(side)], 1.0);
        }
        let nonzero: Vec<usize> = (0..ACTION_DIM).filter(|i| v[*i] != 0.0).collect();
        // Two 6D ones, one quaternion w and one open gripper per side.
        assert_eq!(nonzero.len(), 2 * (2 + 1 + 1));
    }

    #[test]
    fn unpack_rejects_bad_length() {
        let err = unpack(&[0.0; 75], ActionMask::all()).unwrap_err();
        assert_eq!(err, ActionSpaceError::BadLength { expected: 76, got: 75 });
    }

    #[test]
    fn unpack_degenerate_blocks_depend_on_mask() {
        let v = [0.0; ACTION_DIM];
        let u = unpack(&v, ActionMask::none()).unwrap();
        assert_eq!(u.eef.left.orientation, Quaternion::IDENTITY);
        assert!(matches!(
            unpack(&v, ActionMask::all()),
            Err(ActionSpaceError::Degenerate { .. })
        ));
    }

    #[test]
    fn normalize_examples() {
        let mean: ActionVector = std::array::from_fn(|i| i as f64 * 0.1);
        let stats = NormStats::new(mean, [2.0; ACTION_DIM]);
        assert_eq!(stats.normalize(&mean), [0.0; ACTION_DIM]);
        let v: ActionVector = std::array::from_fn(|i| (i as f64).sin());
        assert_eq!(NormStats::identity().normalize(&v), v);
        assert_eq!(NormStats::new(mean, [0.0; ACTION_DIM]).std[3], STD_FLOOR);
    }

    #[test]
    fn stats_csv_round_trip() {
        let stats = NormStats::new(
            std::array::from_fn(|i| (i as f64).cos() / 3.0),
            std::array::from_fn(|i| 0.5 + i as f64 / 7.0),
        );
        assert_eq!(NormStats::from_csv(&stats.to_csv()).unwrap(), stats);
        assert!(NormStats::from_csv("dim,mean,std\n0,1,1\n").is_none());
    }

    #[test]
    fn thumb_reference_examples() {
        let mut h = HumanHandState::default();
        h.right.fingertips[0] = Vec3::new(0.1, 0.2, 0.3);
        let p = thumb_reference(&h, Side::Right, &Vec3::zeros()).unwrap();
        assert_eq!(p.position, Vec3::new(0.1, 0.2, 0.3));
        assert_eq!(p.orientation, Quaternion::IDENTITY);

        let p = thumb_reference(&h, Side::Right, &Vec3::new(0.0, 0.0, -0.03)).unwrap();
        assert_relative_eq!(p.position, Vec3::new(0.1, 0.2, 0.27), epsilon = 1e-15);

        let rz = Quaternion::from_axis_angle(&Vec3::z(), FRAC_PI_2);
        h.right.wrist.orientation = SixDOrientation::from_quaternion(&rz);
        let p = thumb_reference(&h, Side::Right, &Vec3::new(0.03, 0.0, 0.0)).unwrap();
        assert_relative_eq!(p.position, Vec3::new(0.1, 0.23, 0.3), epsilon = 1e-15);
    }

    #[test]
    fn canonicalize_restores_invariants() {
        let mut v = [0.0; ACTION_DIM];
        v[dims::eef_quat(Side::Left)].copy_from_slice(&[-2.0, 0.0, 0.0, 0.0]);
        v[dims::wrist_sixd(Side::Right)].copy_from_slice(&[2.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        v[dims::gripper(Side::Left)] = 1.7;
        canonicalize(&mut v);
        assert_eq!(&v[dims::eef_quat(Side::Left)], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(&v[dims::eef_quat(Side::Right)], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(&v[dims::wrist_sixd(Side::Right)], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(v[dims::gripper(Side::Left)], 1.0);
        unpack(&v, ActionMask::all()).unwrap();
    }

    fn arb_vec3() -> impl Strategy<Value = Vec3> {
        prop::array::uniform3(-1.0f64..1.0).prop_map(|a| Vec3::new(a[0], a[1], a[2]))
    }

    fn arb_quat() -> impl Strategy<Value = Quaternion> {
        (arb_vec3(), -3.0f64..3.0).prop_map(|(axis, angle)| Quaternion::from_axis_angle(&axis, angle))
    }

    fn arb_hand() -> impl Strategy<Value = HandState> {
        (arb_vec3(), arb_quat(), prop::array::uniform5(arb_vec3())).prop_map(|(p, q, tips)| HandState {
            wrist: WristPose::from_pose(&Pose::new(p, q)),
            fingertips: tips,
        })
    }

    fn arb_arm() -> impl Strategy<Value = ArmJointState> {
        (prop::array::uniform6(-3.0f64..3.0), 0.0f64..=1.0).prop_map(|(q, g)| ArmJointState {
            q: JointVector(q),
            gripper: g,
        })
    }

    fn arb_action() -> impl Strategy<Value = UnifiedAction> {
        (
            arb_hand(),
            arb_hand(),
            arb_arm(),
            arb_arm(),
            (arb_vec3(), arb_quat(), arb_vec3(), arb_quat()),
            prop::array::uniform32(any::<bool>()),
        )
            .prop_map(|(l, r, la, ra, (lp, lq, rp, rq), bits)| UnifiedAction {
                human: HumanHandState { left: l, right: r },
                robot: RobotJointState { left: la, right: ra },
                eef: EefState::new(Pose::new(lp, lq), Pose::new(rp, rq)),
                mask: ActionMask::from_bits(std::array::from_fn(|i| bits[i % 32])),
            })
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(u in arb_action()) {
            let v = pack(&u);
            let back = unpack(&v, u.mask).unwrap();
            prop_assert_eq!(back, u);
            prop_assert_eq!(pack(&back), v);
        }

        #[test]
        fn normalize_round_trip(
            v in prop::array::uniform32(-100.0f64..100.0),
            m in prop::array::uniform32(-10.0f64..10.0),
            s in prop::array::uniform32(1e-3f64..50.0),
        ) {
            let stats = NormStats::new(
                std::array::from_fn(|i| m[i % 32]),
                std::array::from_fn(|i| s[(i * 7) % 32]),
            );
            let x: ActionVector = std::array::from_fn(|i| v[(i * 3) % 32]);
            let back = stats.denormalize(&stats.normalize(&x));
            for i in 0..ACTION_DIM {
                prop_assert!((back[i] - x[i]).abs() <= 1e-9 * x[i].abs().max(1.0));
            }
        }
    }
}
