//! Bidirectional human ↔ robot action mapping.
//!
//! Human → robot: the thumb reference point drives the end effector by
//! relative displacement from the first frame, mapped through `r_h`; joint
//! targets come from warm-started IK and the gripper from the thumb–index
//! aperture.
//!
//! Robot → human: the end-effector pose, mapped through `r_m`, becomes the
//! thumb reference pose; the wrist and fingertips are placed around it from
//! fixed hand proportions scaled by the gripper opening.

use crate::actionspace::{
    dims, pack, thumb_reference, unpack, ActionMask, ActionVector, UnifiedAction, ACTION_DIM, ArmJointState, EefState, HandState, HumanHandState, RobotJointState, Side,
    WristPose, DEFAULT_THUMB_OFFSET, NUM_FINGERS,
};
use crate::geometry::{apply_transform, FrameTransform, GeometryError, Pose, Quaternion, Vec3};
use crate::kinematics::{
    forward_kinematics, solve_ik_best, IkParams, JointVector, KinematicChain, KinematicsError,
};
use serde::Serialize;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetargetError {
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("trajectory lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid retarget configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("report io: {0}")]
    Io(String),
}

/// Hand proportions used to place fingertips around the thumb.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerParams {
    /// Thumb, index, middle, ring, pinky (m). The thumb length is the
    /// knuckle-to-wrist distance; the others are thumb-tip-to-fingertip
    /// distances at full opening.
    pub base_lengths: [f64; NUM_FINGERS],
    /// Unit directions from the thumb tip to the index..pinky tips, right
    /// hand frame.
    pub spread_directions: [Vec3; NUM_FINGERS - 1],
    /// Unit direction from the thumb reference point to the wrist, right hand frame.
    pub wrist_direction: Vec3,
    /// `(closed, open)` extension factors for the thumb/index pair.
    pub dominant_factors: (f64, f64),
    /// `(closed, open)` extension factors for middle, ring and pinky.
    pub synergistic_factors: (f64, f64),
    /// Axis (0 = x) negated to obtain left-hand geometry from the right hand.
    pub mirror_axis: usize,
}

impl Default for FingerParams {
    fn default() -> Self {
        Self {
            base_lengths: [0.10, 0.08, 0.085, 0.08, 0.065],
            spread_directions: [
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(-0.25, 0.95, 0.2).normalize(),
                Vec3::new(-0.5, 0.85, 0.3).normalize(),
                Vec3::new(-0.75, 0.6, 0.35).normalize(),
            ],
            wrist_direction: Vec3::new(0.0, 0.0, -1.0),
            dominant_factors: (0.6, 1.0),
            synergistic_factors: (0.8, 1.0),
            mirror_axis: 0,
        }
    }
}

impl FingerParams {
    /// Extension factor α_f(g), linear between the closed and open factors.
    pub fn extension(&self, finger: usize, gripper: f64) -> f64 {
        let (closed, open) = if finger <= 1 {
            self.dominant_factors
        } else {
            self.synergistic_factors
        };
        closed + (open - closed) * gripper
    }

    pub fn mirror(&self, v: &Vec3, side: Side) -> Vec3 {
        let mut out = *v;
        if side == Side::Left {
            out[self.mirror_axis] = -out[self.mirror_axis];
        }
        out
    }

    fn validate(&self) -> Result<(), RetargetError> {
        if self.base_lengths.iter().any(|l| !(*l > 0.0)) {
            return Err(RetargetError::InvalidConfig(
                "finger base lengths must be positive".into(),
            ));
        }
        let unit = |v: &Vec3| (v.norm() - 1.0).abs() <= 1e-9;
        if !self.spread_directions.iter().all(unit) || !unit(&self.wrist_direction) {
            return Err(RetargetError::InvalidConfig(
                "finger and wrist directions must be unit vectors".into(),
            ));
        }
        if self.mirror_axis > 2 {
            return Err(RetargetError::InvalidConfig("mirror_axis must be 0, 1 or 2".into()));
        }
        Ok(())
    }
}

/// Thumb–index distances that map to gripper 0 (closed) and 1 (open).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GripperCalibration {
    pub min_dist: f64,
    pub max_dist: f64,
}

impl GripperCalibration {
    /// The calibration under which synthesized hands read back the gripper
    /// value they were built from.
    pub fn matching(fingers: &FingerParams) -> Self {
        let index = fingers.base_lengths[1];
        Self {
            min_dist: index * fingers.extension(1, 0.0),
            max_dist: index * fingers.extension(1, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetargetConfig {
    /// Human frame → robot frame.
    pub r_h: FrameTransform,
    /// Robot frame → human frame.
    pub r_m: FrameTransform,
    pub initial_eef: EefState,
    pub left_chain: KinematicChain,
    pub right_chain: KinematicChain,
    /// IK seed for the first step of every trajectory.
    pub home: RobotJointState,
    pub fingers: FingerParams,
    pub gripper_calibration: GripperCalibration,
    /// Wrist-frame offset from the thumb fingertip to the thumb reference
    /// point (right hand; mirrored for the left).
    pub thumb_offset: Vec3,
    pub ik: IkParams,
}

/// Human camera frame (x right, y down, z forward) to robot base frame
/// (x forward, y left, z up).
pub fn default_human_to_robot() -> FrameTransform {
    let linear = crate::geometry::Mat3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    FrameTransform::new(linear, Vec3::zeros()).expect("proper rotation")
}

impl RetargetConfig {
    /// Bimanual setup from two chains and a home configuration; the initial
    /// end-effector poses are the home poses and `r_m` is the exact inverse
    /// of `r_h`.
    pub fn new(
        left_chain: KinematicChain,
        right_chain: KinematicChain,
        home: RobotJointState,
        r_h: FrameTransform,
    ) -> Result<Self, RetargetError> {
        let initial_eef = EefState::new(
            forward_kinematics(&left_chain, &home.left.q),
            forward_kinematics(&right_chain, &home.right.q),
        );
        let fingers = FingerParams::default();
        let cfg = Self {
            r_m: r_h.inverse()?,
            r_h,
            initial_eef,
            left_chain,
            right_chain,
            home,
            gripper_calibration: GripperCalibration::matching(&fingers),
            fingers,
            thumb_offset: Vec3::from(DEFAULT_THUMB_OFFSET),
            ik: IkParams::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `arm_a` on both sides, bases 0.25 m either side of the origin.
    pub fn default_bimanual() -> Self {
        let base = |y: f64| Pose::from_translation(Vec3::new(0.0, y, 0.0));
        let chain = KinematicChain::preset("arm_a").expect("preset");
        let arm = ArmJointState {
            q: default_home_joints(),
            gripper: 1.0,
        };
        Self::new(
            chain.clone().with_base(base(0.25)),
            chain.with_base(base(-0.25)),
            RobotJointState { left: arm, right: arm },
            default_human_to_robot(),
        )
        .expect("default config is valid")
    }

    pub fn validate(&self) -> Result<(), RetargetError> {
        self.fingers.validate()?;
        let c = &self.gripper_calibration;
        if !(c.min_dist < c.max_dist) {
            return Err(RetargetError::InvalidConfig(format!(
                "gripper calibration needs min_dist < max_dist, got {} >= {}",
                c.min_dist, c.max_dist
            )));
        }
        for side in Side::BOTH {
            if !self.chain(side).within_limits(&self.home.arm(side).q) {
                return Err(RetargetError::InvalidConfig(format!(
                    "{side} home configuration is outside the joint limits"
                )));
            }
        }
        Ok(())
    }

    pub fn chain(&self, side: Side) -> &KinematicChain {
        match side {
            Side::Left => &self.left_chain,
            Side::Right => &self.right_chain,
        }
    }

    pub fn thumb_offset_for(&self, side: Side) -> Vec3 {
        self.fingers.mirror(&self.thumb_offset, side)
    }

    /// Home hand state: the synthesized hand at the initial end effector.
    pub fn home_hand(&self) -> HumanHandState {
        robot_to_human(&[self.initial_eef], &[[self.home.left.gripper, self.home.right.gripper]], self)
            .expect("non-empty")
            .remove(0)
    }
}

/// Elbow-bent, wrist-down configuration shared by both preset arms.
pub fn default_home_joints() -> JointVector {
    JointVector([0.0, 0.5, 1.4, 0.0, 1.2, 0.0])
}

/// One row of the per-step retarget report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub step: usize,
    pub side: Side,
    pub converged: bool,
    pub pos_residual: f64,
    pub rot_residual: f64,
    pub gripper: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetargetReport {
    pub rows: Vec<ReportRow>,
}

impl RetargetReport {
    pub fn converged(&self, step: usize, side: Side) -> bool {
        self.rows
            .iter()
            .find(|r| r.step == step && r.side == side)
            .is_some_and(|r| r.converged)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.converged).count()
    }

    pub fn max_pos_residual(&self) -> f64 {
        self.rows.iter().map(|r| r.pos_residual).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), RetargetError> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row).map_err(|e| RetargetError::Io(e.to_string()))?;
        }
        out.flush().map_err(|e| RetargetError::Io(e.to_string()))
    }
}

/// End-effector targets from a human trajectory.
///
/// Positions: `eef_t = eef_0 + R^h (thumb_t − thumb_0)` per side.
/// Orientations: `eef_rot_0 · (R·wrist_0)⁻¹ · (R·wrist_t)` with `R` the
/// rotation factor of `r_h`. Step 0 is `cfg.initial_eef` exactly.
pub fn human_to_robot_eef(
    traj: &[HumanHandState],
    cfg: &RetargetConfig,
) -> Result<Vec<EefState>, RetargetError> {
    let first = traj.first().ok_or(RetargetError::EmptyTrajectory)?;
    let rot = cfg.r_h.rotation();
    let mut refs0 = [Pose::identity(); 2];
    for side in Side::BOTH {
        refs0[side.index()] = thumb_reference(first, side, &cfg.thumb_offset_for(side))?;
    }
    let mut out = Vec::with_capacity(traj.len());
    out.push(cfg.initial_eef);
    for h in &traj[1..] {
        let mut eef = cfg.initial_eef;
        for side in Side::BOTH {
            let r0 = &refs0[side.index()];
            let rt = thumb_reference(h, side, &cfg.thumb_offset_for(side))?;
            let init = cfg.initial_eef.pose(side);
            let displacement = cfg.r_h.apply_vector(&(rt.position - r0.position));
            let relative = rot
                .mul(&r0.orientation)
                .inverse()
                .mul(&rot.mul(&rt.orientation));
            *eef.pose_mut(side) = Pose::new(
                init.position + displacement,
                init.orientation.mul(&relative),
            );
        }
        out.push(eef);
    }
    Ok(out)
}

/// Gripper opening from the thumb–index fingertip distance, linear through
/// the calibration range and clamped to `[0, 1]`.
pub fn estimate_gripper(h: &HumanHandState, side: Side, cfg: &RetargetConfig) -> f64 {
    let hand = h.hand(side);
    let d = (hand.fingertips[1] - hand.fingertips[0]).norm();
    let c = &cfg.gripper_calibration;
    let g = (d - c.min_dist) / (c.max_dist - c.min_dist);
    if g.is_nan() {
        0.0
    } else {
        g.clamp(0.0, 1.0)
    }
}

/// Warm-started IK per arm plus gripper estimation.
///
/// A step whose IK does not converge holds the previous step's joints and
/// is flagged in the report; the trajectory is never aborted.
pub fn human_to_robot_joints(
    eef_traj: &[EefState],
    human_traj: &[HumanHandState],
    cfg: &RetargetConfig,
) -> Result<(Vec<RobotJointState>, RetargetReport), RetargetError> {
    if eef_traj.is_empty() {
        return Err(RetargetError::EmptyTrajectory);
    }
    if eef_traj.len() != human_traj.len() {
        return Err(RetargetError::LengthMismatch(eef_traj.len(), human_traj.len()));
    }
    let mut joints = vec![RobotJointState::default(); eef_traj.len()];
    let mut report = RetargetReport::default();
    for side in Side::BOTH {
        let chain = cfg.chain(side);
        let mut held = chain.clamp(&cfg.home.arm(side).q);
        for (t, (eef, h)) in eef_traj.iter().zip(human_traj).enumerate() {
            let sol = solve_ik_best(chain, eef.pose(side), &held, &cfg.ik)?;
            if sol.converged {
                held = sol.q;
            }
            let gripper = estimate_gripper(h, side, cfg);
            *joints[t].arm_mut(side) = ArmJointState { q: held, gripper };
            report.rows.push(ReportRow {
                step: t,
                side,
                converged: sol.converged,
                pos_residual: sol.position_error,
                rot_residual: sol.orientation_error,
                gripper,
            });
        }
    }
    report.rows.sort_by_key(|r| (r.step, r.side));
    Ok((joints, report))
}

/// Full human → robot mapping.
pub fn human_to_robot(
    traj: &[HumanHandState],
    cfg: &RetargetConfig,
) -> Result<(Vec<EefState>, Vec<RobotJointState>, RetargetReport), RetargetError> {
    let eef = human_to_robot_eef(traj, cfg)?;
    let (joints, report) = human_to_robot_joints(&eef, traj, cfg)?;
    Ok((eef, joints, report))
}

/// Thumb reference poses `R^m(eef)` for the left and right hands.
pub fn robot_to_human_thumb(
    eef_traj: &[EefState],
    cfg: &RetargetConfig,
) -> Result<Vec<[Pose; 2]>, RetargetError> {
    if eef_traj.is_empty() {
        return Err(RetargetError::EmptyTrajectory);
    }
    Ok(eef_traj
        .iter()
        .map(|e| {
            [
                apply_transform(&cfg.r_m, &e.left),
                apply_transform(&cfg.r_m, &e.right),
            ]
        })
        .collect())
}

/// Places the wrist and fingertips around a thumb reference pose.
///
/// The thumb tip sits where [`thumb_reference`] maps back to `thumb`; the
/// other tips are spread from the thumb tip by `base_length · α(gripper)`;
/// the wrist lies one thumb length behind the reference point. Left-hand
/// geometry mirrors the right hand across `mirror_axis`.
pub fn synthesize_fingers(thumb: &Pose, gripper: f64, side: Side, cfg: &RetargetConfig) -> HandState {
    let f = &cfg.fingers;
    let rot = thumb.orientation;
    let local = |v: Vec3| rot.rotate(&f.mirror(&v, side));
    let thumb_tip = thumb.position - local(cfg.thumb_offset);
    let mut tips = [thumb_tip; NUM_FINGERS];
    for finger in 1..NUM_FINGERS {
        let reach = f.base_lengths[finger] * f.extension(finger, gripper);
        tips[finger] = thumb_tip + local(f.spread_directions[finger - 1] * reach);
    }
    let wrist = Pose::new(
        thumb.position + local(f.wrist_direction * f.base_lengths[0]),
        rot,
    );
    HandState {
        wrist: WristPose::from_pose(&wrist),
        fingertips: tips,
    }
}

/// Robot end-effector trajectory plus per-arm gripper values to human hands.
pub fn robot_to_human(
    eef_traj: &[EefState],
    grippers: &[[f64; 2]],
    cfg: &RetargetConfig,
) -> Result<Vec<HumanHandState>, RetargetError> {
    if eef_traj.len() != grippers.len() {
        return Err(RetargetError::LengthMismatch(eef_traj.len(), grippers.len()));
    }
    let thumbs = robot_to_human_thumb(eef_traj, cfg)?;
    Ok(thumbs
        .iter()
        .zip(grippers)
        .map(|(pair, g)| {
            let mut h = HumanHandState::default();
            for side in Side::BOTH {
                let i = side.index();
                *h.hand_mut(side) = synthesize_fingers(&pair[i], g[i].clamp(0.0, 1.0), side, cfg);
            }
            h
        })
        .collect())
}

/// Joint-space variant: forward kinematics first, then [`robot_to_human`].
pub fn robot_joints_to_human(
    traj: &[RobotJointState],
    cfg: &RetargetConfig,
) -> Result<Vec<HumanHandState>, RetargetError> {
    let eef: Vec<EefState> = traj.iter().map(|j| robot_eef(j, cfg)).collect();
    let grippers: Vec<[f64; 2]> = traj.iter().map(|j| [j.left.gripper, j.right.gripper]).collect();
    robot_to_human(&eef, &grippers, cfg)
}

pub fn robot_eef(j: &RobotJointState, cfg: &RetargetConfig) -> EefState {
    EefState::new(
        forward_kinematics(&cfg.left_chain, &j.left.q),
        forward_kinematics(&cfg.right_chain, &j.right.q),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    HumanToRobot,
    RobotToHuman,
}

impl std::str::FromStr for Direction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "h2r" | "human-to-robot" => Ok(Self::HumanToRobot),
            "r2h" | "robot-to-human" => Ok(Self::RobotToHuman),
            other => Err(format!("unknown direction `{other}` (use h2r or r2h)")),
        }
    }
}

/// Retargets a trajectory of unified vectors. Each output row is its input
/// row with the other embodiment's dims filled in; robot joints of steps
/// whose IK failed stay masked out. Robot input needs grippers plus either
/// end-effector poses or joints (end effectors then come from FK).
pub fn retarget_trajectory(
    rows: &[(ActionVector, ActionMask)],
    direction: Direction,
    cfg: &RetargetConfig,
) -> Result<(Vec<(ActionVector, ActionMask)>, RetargetReport), RetargetError> {
    if rows.is_empty() {
        return Err(RetargetError::EmptyTrajectory);
    }
    let need = |m: ActionMask, what: &str| -> Result<(), RetargetError> {
        match rows.iter().position(|(_, have)| !have.contains(&m)) {
            Some(t) => Err(RetargetError::InvalidConfig(format!("step {t} lacks {what} dims"))),
            None => Ok(()),
        }
    };
    let mut out = rows.to_vec();
    match direction {
        Direction::HumanToRobot => {
            let hm = ActionMask::human_sides(&Side::BOTH);
            need(hm, "human")?;
            let hands: Vec<HumanHandState> = rows
                .iter()
                .map(|(v, _)| unpack(v, hm).map(|u| u.human))
                .collect::<Result<_, _>>()
                .map_err(|e| RetargetError::InvalidConfig(e.to_string()))?;
            let (eef, joints, report) = human_to_robot(&hands, cfg)?;
            for (t, (v, m)) in out.iter_mut().enumerate() {
                let filled = pack(&UnifiedAction {
                    robot: joints[t],
                    eef: eef[t],
                    ..Default::default()
                });
                for side in Side::BOTH {
                    let mut fill = ActionMask::none().with_range(dims::eef_pose(side), true);
                    if report.converged(t, side) {
                        fill = fill.with_range(dims::arm(side), true);
                    } else {
                        for i in dims::arm(side) {
                            m.set(i, false);
                        }
                    }
                    for i in 0..ACTION_DIM {
                        if fill.get(i) {
                            v[i] = filled[i];
                        }
                    }
                    *m = *m | fill;
                }
            }
            Ok((out, report))
        }
        Direction::RobotToHuman => {
            let mut grip = ActionMask::none();
            for side in Side::BOTH {
                grip.set(dims::gripper(side), true);
            }
            need(grip, "gripper")?;
            let eef_mask = ActionMask::none().with_range(dims::eef(), true);
            let joint_mask = ActionMask::none().with_range(dims::robot(), true);
            let mut eefs = Vec::with_capacity(rows.len());
            let mut grippers = Vec::with_capacity(rows.len());
            for (t, (v, m)) in rows.iter().enumerate() {
                let e = if m.contains(&eef_mask) {
                    unpack(v, eef_mask).map_err(|e| RetargetError::InvalidConfig(e.to_string()))?.eef
                } else if m.contains(&joint_mask) {
                    let u = unpack(v, joint_mask).map_err(|e| RetargetError::InvalidConfig(e.to_string()))?;
                    robot_eef(&u.robot, cfg)
                } else {
                    return Err(RetargetError::InvalidConfig(format!(
                        "step {t} has neither end-effector poses nor joints"
                    )));
                };
                eefs.push(e);
                grippers.push([v[dims::gripper(Side::Left)], v[dims::gripper(Side::Right)]]);
            }
            let hands = robot_to_human(&eefs, &grippers, cfg)?;
            let hm = ActionMask::human_sides(&Side::BOTH);
            let mut report = RetargetReport::default();
            for (t, ((v, m), h)) in out.iter_mut().zip(&hands).enumerate() {
                let filled = pack(&UnifiedAction {
                    human: *h,
                    ..Default::default()
                });
                for i in 0..ACTION_DIM {
                    if hm.get(i) {
                        v[i] = filled[i];
                    }
                }
                *m = *m | hm;
                for side in Side::BOTH {
                    report.rows.push(ReportRow {
                        step: t,
                        side,
                        converged: true,
                        pos_residual: 0.0,
                        rot_residual: 0.0,
                        gripper: grippers[t][side.index()],
                    });
                }
            }
            Ok((out, report))
        }
    }
}

/// Rotation by `q` of every pose in a hand (positions about the origin).
pub fn rotate_hand(h: &HandState, q: &Quaternion) -> Result<HandState, GeometryError> {
    let wrist = h.wrist.to_pose()?;
    Ok(HandState {
        wrist: WristPose::from_pose(&Pose::new(q.rotate(&wrist.position), q.mul(&wrist.orientation))),
        fingertips: h.fingertips.map(|p| q.rotate(&p)),
    })
}
