//! Serial 6-DoF arm kinematics: forward kinematics, the geometric Jacobian
//! and a damped-least-squares inverse kinematics solver.
//!
//! Chains are described explicitly as a list of joint axes and fixed parent
//! offsets rather than Denavit–Hartenberg parameters.

use crate::geometry::{geodesic_distance, Pose, Quaternion, Vec3};
use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const NUM_JOINTS: usize = 6;

pub type Jacobian = Matrix6<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinematicsError {
    #[error("chain must have exactly {NUM_JOINTS} joints, got {0}")]
    WrongJointCount(usize),
    #[error("joint {joint}: axis norm {norm} is not 1")]
    BadAxis { joint: usize, norm: f64 },
    #[error("joint {joint}: limits [{min}, {max}] are empty")]
    BadLimits { joint: usize, min: f64, max: f64 },
    #[error("seed joint {joint} = {value} is outside [{min}, {max}]")]
    SeedOutOfLimits {
        joint: usize,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("IK did not converge after {} iterations (pos {:.3e} m, rot {:.3e} rad)", .best.iterations, .best.position_error, .best.orientation_error)]
    NotConverged { best: Box<IkSolution> },
    #[error("unknown chain preset {0:?}")]
    UnknownPreset(String),
    #[error("chain file: {0}")]
    Parse(String),
    #[error("chain file io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum JointKind {
    #[serde(rename = "revolute")]
    Revolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub axis: Vec3,
    /// Fixed transform from the previous link frame to this joint's frame.
    pub offset: Pose,
    pub limits: (f64, f64),
    #[serde(default = "revolute")]
    pub kind: JointKind,
}

fn revolute() -> JointKind {
    JointKind::Revolute
}

impl JointSpec {
    pub fn revolute(axis: Vec3, offset: Pose, limits: (f64, f64)) -> Self {
        Self {
            axis,
            offset,
            limits,
            kind: JointKind::Revolute,
        }
    }
}

/// Joint angles of one arm, radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointVector(pub [f64; NUM_JOINTS]);

impl JointVector {
    pub fn zeros() -> Self {
        Self([0.0; NUM_JOINTS])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let mut q = [0.0; NUM_JOINTS];
        q.copy_from_slice(&v[..NUM_JOINTS]);
        Self(q)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChainFile", into = "ChainFile")]
pub struct KinematicChain {
    name: String,
    base: Pose,
    joints: Vec<JointSpec>,
    tool: Pose,
}

/// On-disk (TOML) layout of a chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChainFile {
    name: String,
    base: Pose,
    tool: Pose,
    joints: Vec<JointSpec>,
}

impl TryFrom<ChainFile> for KinematicChain {
    type Error = KinematicsError;
    fn try_from(f: ChainFile) -> Result<Self, Self::Error> {
        KinematicChain::new(f.name, f.base, f.joints, f.tool)
    }
}

impl From<KinematicChain> for ChainFile {
    fn from(c: KinematicChain) -> Self {
        ChainFile {
            name: c.name,
            base: c.base,
            tool: c.tool,
            joints: c.joints,
        }
    }
}

impl KinematicChain {
    pub fn new(
        name: impl Into<String>,
        base: Pose,
        joints: Vec<JointSpec>,
        tool: Pose,
    ) -> Result<Self, KinematicsError> {
        if joints.len() != NUM_JOINTS {
            return Err(KinematicsError::WrongJointCount(joints.len()));
        }
        for (i, j) in joints.iter().enumerate() {
            let norm = j.axis.norm();
            if !((norm - 1.0).abs() <= 1e-9) {
                return Err(KinematicsError::BadAxis { joint: i, norm });
            }
            let (min, max) = j.limits;
            if !(min < max) {
                return Err(KinematicsError::BadLimits { joint: i, min, max });
            }
        }
        Ok(Self {
            name: name.into(),
            base,
            joints,
            tool,
        })
    }

    /// Built-in arms: `arm_a` and `arm_b` share a joint layout but differ in
    /// link lengths.
    pub fn preset(name: &str) -> Result<Self, KinematicsError> {
        let (shoulder, upper, fore, wrist, tool) = match name {
            "arm_a" => (0.12, 0.30, 0.25, 0.07, 0.10),
            "arm_b" => (0.10, 0.36, 0.30, 0.08, 0.12),
            other => return Err(KinematicsError::UnknownPreset(other.to_string())),
        };
        let deg = std::f64::consts::PI / 180.0;
        let up = |d: f64| Pose::from_translation(Vec3::new(0.0, 0.0, d));
        let joints = vec![
            JointSpec::revolute(Vec3::z(), up(shoulder), (-170.0 * deg, 170.0 * deg)),
            JointSpec::revolute(Vec3::y(), Pose::identity(), (-110.0 * deg, 110.0 * deg)),
            JointSpec::revolute(Vec3::y(), up(upper), (-150.0 * deg, 150.0 * deg)),
            JointSpec::revolute(Vec3::z(), up(fore), (-170.0 * deg, 170.0 * deg)),
            JointSpec::revolute(Vec3::y(), Pose::identity(), (-120.0 * deg, 120.0 * deg)),
            JointSpec::revolute(Vec3::z(), up(wrist), (-170.0 * deg, 170.0 * deg)),
        ];
        Self::new(name, Pose::identity(), joints, up(tool))
    }

    pub fn with_base(mut self, base: Pose) -> Self {
        self.base = base;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn base(&self) -> &Pose {
        &self.base
    }

    pub fn tool(&self) -> &Pose {
        &self.tool
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn limits(&self) -> [(f64, f64); NUM_JOINTS] {
        std::array::from_fn(|i| self.joints[i].limits)
    }

    pub fn clamp(&self, q: &JointVector) -> JointVector {
        JointVector(std::array::from_fn(|i| {
            let (lo, hi) = self.joints[i].limits;
            q.0[i].clamp(lo, hi)
        }))
    }

    pub fn within_limits(&self, q: &JointVector) -> bool {
        q.0.iter()
            .zip(&self.joints)
            .all(|(v, j)| *v >= j.limits.0 && *v <= j.limits.1)
    }

    /// Midpoint of every joint range.
    pub fn mid_configuration(&self) -> JointVector {
        JointVector(std::array::from_fn(|i| {
            let (lo, hi) = self.joints[i].limits;
            0.5 * (lo + hi)
        }))
    }

    pub fn from_toml_str(s: &str) -> Result<Self, KinematicsError> {
        toml::from_str(s).map_err(|e| KinematicsError::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("chain serializes")
    }

    pub fn load(path: &Path) -> Result<Self, KinematicsError> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| KinematicsError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }
}

/// Per-joint world frames produced while walking the chain.
struct ChainFrames {
    origins: [Vec3; NUM_JOINTS],
    axes: [Vec3; NUM_JOINTS],
    end: Pose,
}

fn walk(chain: &KinematicChain, q: &JointVector) -> ChainFrames {
    let mut frame = chain.base;
    let mut origins = [Vec3::zeros(); NUM_JOINTS];
    let mut axes = [Vec3::zeros(); NUM_JOINTS];
    for (i, joint) in chain.joints.iter().enumerate() {
        frame = frame.compose(&joint.offset);
        origins[i] = frame.position;
        axes[i] = frame.orientation.rotate(&joint.axis);
        let rot = Quaternion::from_axis_angle(&joint.axis, q.0[i]);
        frame = Pose::new(frame.position, frame.orientation.mul(&rot));
    }
    ChainFrames {
        origins,
        axes,
        end: frame.compose(&chain.tool),
    }
}

/// Tool pose in the chain's parent frame.
pub fn forward_kinematics(chain: &KinematicChain, q: &JointVector) -> Pose {
    walk(chain, q).end
}

/// Geometric Jacobian; rows 0..3 linear velocity, rows 3..6 angular velocity.
pub fn jacobian(chain: &KinematicChain, q: &JointVector) -> Jacobian {
    let frames = walk(chain, q);
    let p_end = frames.end.position;
    let mut j = Jacobian::zeros();
    for i in 0..NUM_JOINTS {
        let z = frames.axes[i];
        let lin = z.cross(&(p_end - frames.origins[i]));
        j.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
        j.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
    }
    j
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IkParams {
    pub position_tolerance: f64,
    pub orientation_tolerance: f64,
    pub max_iterations: usize,
    /// Base damping λ; doubled whenever a step increases the error.
    pub damping: f64,
    /// Upper bound on the joint step norm per iteration (rad).
    pub max_step: f64,
    /// Iterations spent from one seed before restarting from the next
    /// deterministic restart seed. Restarts share `max_iterations`.
    pub restart_after: usize,
}

impl Default for IkParams {
    fn default() -> Self {
        Self {
            position_tolerance: 1e-3,
            orientation_tolerance: 1e-2,
            max_iterations: 200,
            damping: 0.05,
            max_step: 1.0,
            restart_after: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IkSolution {
    pub q: JointVector,
    pub position_error: f64,
    pub orientation_error: f64,
    pub iterations: usize,
    pub converged: bool,
}

const LAMBDA_MAX: f64 = 1e3;
const LAMBDA_FLOOR_RATIO: f64 = 1e-3;

fn pose_error(target: &Pose, current: &Pose) -> (Vector6<f64>, f64, f64) {
    let dp = target.position - current.position;
    let dr = target
        .orientation
        .mul(&current.orientation.inverse())
        .to_rotation_vector();
    let e = Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z);
    (e, dp.norm(), geodesic_distance(&target.orientation, &current.orientation))
}

struct Descent {
    q: JointVector,
    position_error: f64,
    orientation_error: f64,
    cost: f64,
    iterations: usize,
}

/// One damped-least-squares descent from `start`, at most `budget` iterations.
fn descend(
    chain: &KinematicChain,
    target: &Pose,
    start: JointVector,
    params: &IkParams,
    budget: usize,
) -> Descent {
    let done = |pe: f64, re: f64| {
        pe <= params.position_tolerance && re <= params.orientation_tolerance
    };
    let mut q = start;
    let (mut e, mut pe, mut re) = pose_error(target, &forward_kinematics(chain, &q));
    let mut lambda = params.damping;
    let mut iterations = 0;

    while !done(pe, re) && iterations < budget {
        iterations += 1;
        let Some(mut dq) = limited_step(chain, &q, &e, lambda) else {
            lambda = (lambda * 2.0).min(LAMBDA_MAX);
            continue;
        };
        let n = dq.norm();
        if n > params.max_step {
            dq *= params.max_step / n;
        }
        let candidate = chain.clamp(&JointVector(std::array::from_fn(|i| q.0[i] + dq[i])));
        let (ce, cpe, cre) = pose_error(target, &forward_kinematics(chain, &candidate));
        if ce.norm_squared() < e.norm_squared() {
            q = candidate;
            (e, pe, re) = (ce, cpe, cre);
            lambda = (lambda * 0.5).max(params.damping * LAMBDA_FLOOR_RATIO);
        } else {
            lambda = (lambda * 2.0).min(LAMBDA_MAX);
            if lambda >= LAMBDA_MAX {
                break;
            }
        }
    }
    Descent {
        q,
        position_error: pe,
        orientation_error: re,
        cost: e.norm_squared(),
        iterations,
    }
}

const RESTART_POOL: usize = 64;

/// Damped least-squares step with joints that sit on a limit and would be
/// pushed outward removed from the Jacobian, so the free joints compensate.
fn limited_step(
    chain: &KinematicChain,
    q: &JointVector,
    e: &Vector6<f64>,
    lambda: f64,
) -> Option<Vector6<f64>> {
    let mut j = jacobian(chain, q);
    let mut locked = [false; NUM_JOINTS];
    for _ in 0..NUM_JOINTS {
        let jt = j.transpose();
        let lhs = jt * j + Matrix6::identity() * (lambda * lambda);
        let dq = lhs.cholesky()?.solve(&(jt * e));
        let mut changed = false;
        for (i, joint) in chain.joints().iter().enumerate() {
            let (lo, hi) = joint.limits;
            let pushing_out = (q.0[i] <= lo && dq[i] < 0.0) || (q.0[i] >= hi && dq[i] > 0.0);
            if pushing_out && !locked[i] {
                locked[i] = true;
                j.column_mut(i).fill(0.0);
                changed = true;
            }
        }
        if !changed {
            return Some(dq);
        }
    }
    None
}

/// Fixed pool of in-limit configurations, ordered by how close their tool
/// pose already is to `target`. The pool depends only on the chain, so the
/// solver stays a pure function of its inputs.
fn restart_seeds(chain: &KinematicChain, target: &Pose) -> Vec<JointVector> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x1c5e_ed00);
    let mut pool: Vec<(f64, JointVector)> = (0..RESTART_POOL)
        .map(|_| {
            let q = JointVector(std::array::from_fn(|i| {
                let (lo, hi) = chain.joints()[i].limits;
                rng.random_range(lo..=hi)
            }));
            let (e, _, _) = pose_error(target, &forward_kinematics(chain, &q));
            (e.norm_squared(), q)
        })
        .collect();
    pool.sort_by(|a, b| a.0.total_cmp(&b.0));
    pool.into_iter().map(|(_, q)| q).collect()
}

/// Damped least squares `Δq = (JᵀJ + λ²I)⁻¹ Jᵀ e` with per-step clamping to
/// the joint limits.
///
/// A step that increases the error is rejected and λ doubles; an accepted
/// step halves λ back toward the configured base. When a descent stalls for
/// `restart_after` iterations the solver restarts from a fixed sequence of
/// in-limit seeds, all within the shared `max_iterations` budget. On failure
/// the best iterate is returned inside [`KinematicsError::NotConverged`].
pub fn solve_ik(
    chain: &KinematicChain,
    target: &Pose,
    seed: &JointVector,
    params: &IkParams,
) -> Result<IkSolution, KinematicsError> {
    for (i, (v, j)) in seed.0.iter().zip(chain.joints()).enumerate() {
        let (min, max) = j.limits;
        if !(*v >= min && *v <= max) {
            return Err(KinematicsError::SeedOutOfLimits {
                joint: i,
                value: *v,
                min,
                max,
            });
        }
    }

    let done = |pe: f64, re: f64| {
        pe <= params.position_tolerance && re <= params.orientation_tolerance
    };

    let explore = params.max_iterations;
    let mut best: Option<Descent> = None;
    let mut used = 0;
    let mut attempt = 0;
    let mut restarts = Vec::new();
    while used < explore {
        let start = if attempt == 0 {
            *seed
        } else {
            if restarts.is_empty() {
                restarts = restart_seeds(chain, target);
            }
            match restarts.get(attempt - 1) {
                Some(q) => *q,
                None => break,
            }
        };
        let budget = if params.restart_after == 0 {
            explore - used
        } else {
            params.restart_after.min(explore - used)
        };
        let run = descend(chain, target, start, params, budget);
        used += run.iterations;
        let solved = done(run.position_error, run.orientation_error);
        let stalled = run.iterations == 0 && !solved;
        if best.as_ref().is_none_or(|b| run.cost < b.cost) || solved {
            best = Some(run);
        }
        if solved || stalled {
            break;
        }
        attempt += 1;
    }
    let best = best.unwrap_or_else(|| descend(chain, target, *seed, params, 0));
    let (q, pe, re) = (best.q, best.position_error, best.orientation_error);
    let iterations = used.min(params.max_iterations);

    let solution = IkSolution {
        q,
        position_error: pe,
        orientation_error: re,
        iterations,
        converged: done(pe, re),
    };
    if solution.converged {
        Ok(solution)
    } else {
        Err(KinematicsError::NotConverged {
            best: Box::new(solution),
        })
    }
}

/// Best-effort solve that never fails on convergence: the best iterate is
/// returned with `converged = false`.
pub fn solve_ik_best(
    chain: &KinematicChain,
    target: &Pose,
    seed: &JointVector,
    params: &IkParams,
) -> Result<IkSolution, KinematicsError> {
    match solve_ik(chain, target, seed, params) {
        Ok(s) => Ok(s),
        Err(KinematicsError::NotConverged { best }) => Ok(*best),
        Err(e) => Err(e),
    }
}

/// Solves a trajectory of targets, warm-starting each step from the
/// previous solution. Failed steps keep the last good configuration as the
/// next seed.
pub fn solve_trajectory(
    chain: &KinematicChain,
    targets: &[Pose],
    seed: &JointVector,
    params: &IkParams,
) -> Result<Vec<IkSolution>, KinematicsError> {
    let mut warm = chain.clamp(seed);
    let mut out = Vec::with_capacity(targets.len());
    for target in targets {
        let sol = solve_ik_best(chain, target, &warm, params)?;
        if sol.converged {
            warm = sol.q;
        }
        out.push(sol);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn single_joint_chain() -> KinematicChain {
        let joints = (0..NUM_JOINTS)
            .map(|_| JointSpec::revolute(Vec3::z(), Pose::identity(), (-3.0, 3.0)))
            .collect();
        KinematicChain::new("z", Pose::identity(), joints, Pose::from_translation(Vec3::x()))
            .unwrap()
    }

    fn random_q(chain: &KinematicChain, rng: &mut impl Rng) -> JointVector {
        JointVector(std::array::from_fn(|i| {
            let (lo, hi) = chain.joints()[i].limits;
            rng.random_range(lo..hi)
        }))
    }

    fn homogeneous(p: &Pose) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&p.orientation.to_rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&p.position);
        m
    }

    /// Naive 4×4 product chain, independent of the quaternion walk.
    fn fk_oracle(chain: &KinematicChain, q: &JointVector) -> Matrix4<f64> {
        let mut t = homogeneous(chain.base());
        for (i, j) in chain.joints().iter().enumerate() {
            let rot = nalgebra::Rotation3::from_axis_angle(
                &nalgebra::Unit::new_normalize(j.axis),
                q.0[i],
            );
            let mut r = Matrix4::identity();
            r.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.matrix());
            t = t * homogeneous(&j.offset) * r;
        }
        t * homogeneous(chain.tool())
    }

    #[test]
    fn zero_configuration_composes_offsets() {
        let chain = KinematicChain::preset("arm_a").unwrap();
        let p = forward_kinematics(&chain, &JointVector::zeros());
        assert_relative_eq!(
            p.position,
            Vec3::new(0.0, 0.0, 0.12 + 0.30 + 0.25 + 0.07 + 0.10),
            epsilon = 1e-15
        );
        assert_eq!(p.orientation, Quaternion::IDENTITY);
    }

    #[test]
    fn single_joint_quarter_turn() {
        let chain = single_joint_chain();
        let q = JointVector([FRAC_PI_2, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let p = forward_kinematics(&chain, &q);
        assert_relative_eq!(p.position, Vec3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn fk_matches_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for name in ["arm_a", "arm_b"] {
            let chain = KinematicChain::preset(name).unwrap().with_base(Pose::new(
                Vec3::new(0.1, -0.2, 0.05),
                Quaternion::from_axis_angle(&Vec3::new(1.0, 2.0, 3.0), 0.4),
            ));
            for _ in 0..50 {
                let q = random_q(&chain, &mut rng);
                let p = forward_kinematics(&chain, &q);
                let m = fk_oracle(&chain, &q);
                assert!((homogeneous(&p) - m).abs().max() < 1e-12);
            }
        }
    }

    #[test]
    fn fk_is_bit_deterministic() {
        let chain = KinematicChain::preset("arm_b").unwrap();
        let q = JointVector([0.1, -0.4, 1.2, 0.3, -0.7, 2.0]);
        let a = forward_kinematics(&chain, &q);
        let b = forward_kinematics(&chain, &q);
        assert_eq!(a.position.as_slice(), b.position.as_slice());
        assert_eq!(a.orientation.to_array(), b.orientation.to_array());
    }

    #[test]
    fn jacobian_single_joint_by_hand() {
        let chain = single_joint_chain();
        let j = jacobian(&chain, &JointVector::zeros());
        let col = j.column(0);
        assert_relative_eq!(
            Vector6::from_iterator(col.iter().copied()),
            Vector6::new(0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn jacobian_zero_linear_when_axis_hits_end_effector() {
        // Last joint axis is z and the tool lies along z, so it passes through the tool point.
        let chain = KinematicChain::preset("arm_a").unwrap();
        let q = JointVector([0.3, -0.2, 0.9, 0.4, 0.6, -1.0]);
        let j = jacobian(&chain, &q);
        let lin = j.fixed_view::<3, 1>(0, 5);
        assert!(lin.norm() < 1e-15);
    }

    #[test]
    fn ik_already_solved() {
        let chain = KinematicChain::preset("arm_a").unwrap();
        let seed = JointVector([0.2, 0.4, 0.8, -0.1, 0.6, 0.3]);
        let target = forward_kinematics(&chain, &seed);
        let s = solve_ik(&chain, &target, &seed, &IkParams::default()).unwrap();
        assert!(s.converged && s.iterations <= 2);
        assert!(s.position_error <= 1e-3 && s.orientation_error <= 1e-2);
    }

    #[test]
    fn ik_from_nearby_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chain = KinematicChain::preset("arm_b").unwrap();
        for _ in 0..20 {
            let q_star = chain.clamp(&random_q(&chain, &mut rng));
            let target = forward_kinematics(&chain, &q_star);
            let seed = chain.clamp(&JointVector(std::array::from_fn(|i| {
                q_star.0[i] + rng.random_range(-0.1..0.1)
            })));
            let s = solve_ik(&chain, &target, &seed, &IkParams::default()).unwrap();
            assert!(s.position_error < 1e-3);
            let fk = forward_kinematics(&chain, &s.q);
            assert!((fk.position - target.position).norm() <= 1e-3);
            assert!(chain.within_limits(&s.q));
        }
    }

    #[test]
    fn ik_unreachable_reports_best_iterate() {
        let chain = KinematicChain::preset("arm_a").unwrap();
        let target = Pose::from_translation(Vec3::new(10.0, 0.0, 0.0));
        let seed = JointVector([0.0, 0.5, 0.5, 0.0, 0.5, 0.0]);
        match solve_ik(&chain, &target, &seed, &IkParams::default()) {
            Err(KinematicsError::NotConverged { best }) => {
                assert!(best.q.is_finite());
                assert!(!best.converged);
                assert!(chain.within_limits(&best.q));
            }
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn ik_rejects_seed_outside_limits() {
        let chain = KinematicChain::preset("arm_a").unwrap();
        let seed = JointVector([0.0, 3.0, 0.0, 0.0, 0.0, 0.0]);
        let err = solve_ik(&chain, &Pose::identity(), &seed, &IkParams::default()).unwrap_err();
        assert!(matches!(err, KinematicsError::SeedOutOfLimits { joint: 1, .. }));
    }

    #[test]
    fn chain_validation() {
        let j = JointSpec::revolute(Vec3::z(), Pose::identity(), (-1.0, 1.0));
        assert!(matches!(
            KinematicChain::new("x", Pose::identity(), vec![j; 5], Pose::identity()),
            Err(KinematicsError::WrongJointCount(5))
        ));
        let mut bad = vec![j; 6];
        bad[2].axis = Vec3::new(0.0, 0.0, 2.0);
        assert!(matches!(
            KinematicChain::new("x", Pose::identity(), bad, Pose::identity()),
            Err(KinematicsError::BadAxis { joint: 2, .. })
        ));
        let mut bad = vec![j; 6];
        bad[4].limits = (1.0, 1.0);
        assert!(matches!(
            KinematicChain::new("x", Pose::identity(), bad, Pose::identity()),
            Err(KinematicsError::BadLimits { joint: 4, .. })
        ));
        assert!(KinematicChain::preset("arm_z").is_err());
    }

    #[test]
    fn chain_file_round_trip() {
        let chain = KinematicChain::preset("arm_b")
            .unwrap()
            .with_base(Pose::from_translation(Vec3::new(0.0, 0.25, 0.0)));
        let text = chain.to_toml_string();
        assert!(text.contains("[[joints]]"));
        let back = KinematicChain::from_toml_str(&text).unwrap();
        assert_eq!(back, chain);
        assert!(KinematicChain::from_toml_str("name = 1").is_err());
    }
}
