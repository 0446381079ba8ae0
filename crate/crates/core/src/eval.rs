//! Closed-loop reach rollouts in a pure-kinematic environment.
//!
//! Each control cycle observes the robot state, asks the policy for a chunk
//! and executes its first `k` rows: the task arm's joint and gripper
//! values, clamped to limits, become the new state. Success means the task
//! arm's final end effector lies within a tolerance of the goal.

use crate::actionspace::{dims, ActionChunk, ActionMask, RobotJointState, Side};
use crate::kinematics::JointVector;
use crate::dataset::{
    robot_state_vector, sample_feasible_episode, task_output_mask, DatasetError, Embodiment, ReachEpisode,
    ReachTaskConfig, TASK_NAMES,
};
use crate::kinematics::forward_kinematics;
use crate::policy::{Observation, Policy, PolicyError, Sampler};
use crate::retarget::RetargetConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid evaluation setting: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub rollouts: usize,
    #[serde(skip)]
    pub seed: u64,
    /// Final end-effector distance to the goal counted as success (m).
    pub success_tolerance: f64,
    /// Euler steps per flow sample.
    pub flow_steps: usize,
    /// Initial-noise scale for flow sampling; 0 starts every sample at the
    /// prior mean.
    pub noise_scale: f64,
    /// Rows executed per replan; 0 means a quarter of the horizon.
    pub execute_rows: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rollouts: 50,
            seed: 1000,
            success_tolerance: 0.03,
            flow_steps: 10,
            noise_scale: 0.0,
            execute_rows: 0,
        }
    }
}

impl EvalConfig {
    pub fn sampler(&self) -> Sampler {
        Sampler {
            flow_steps: self.flow_steps,
            noise_scale: self.noise_scale,
        }
    }

    pub fn rows_per_replan(&self, horizon: usize) -> usize {
        if self.execute_rows == 0 {
            (horizon / 4).max(1)
        } else {
            self.execute_rows.min(horizon)
        }
    }
}

/// Anything that maps an observation to an action chunk.
pub trait ChunkPolicy: Sync {
    fn horizon(&self) -> usize;
    fn act(&self, rollout: usize, step: usize, obs: &Observation, mask: &ActionMask, seed: u64)
        -> Result<ActionChunk, EvalError>;
}

pub struct LearnedPolicy<'a> {
    pub policy: &'a Policy,
    pub sampler: Sampler,
}

impl ChunkPolicy for LearnedPolicy<'_> {
    fn horizon(&self) -> usize {
        self.policy.config().horizon
    }

    fn act(&self, _: usize, _: usize, obs: &Observation, mask: &ActionMask, seed: u64) -> Result<ActionChunk, EvalError> {
        Ok(self.policy.sample_actions(obs, mask, self.sampler, seed)?)
    }
}

/// Replays the scripted joint path of each rollout's episode.
pub struct OraclePolicy {
    pub horizon: usize,
    pub paths: Vec<Vec<RobotJointState>>,
    pub cfg: RetargetConfig,
}

impl ChunkPolicy for OraclePolicy {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn act(&self, rollout: usize, step: usize, _: &Observation, mask: &ActionMask, _: u64) -> Result<ActionChunk, EvalError> {
        let path = &self.paths[rollout];
        let rows = (0..self.horizon)
            .map(|r| robot_state_vector(&path[(step + 1 + r).min(path.len() - 1)], &self.cfg))
            .collect();
        Ok(ActionChunk::new(rows, vec![*mask; self.horizon], vec![false; self.horizon]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub instruction_id: u32,
    pub final_error: f64,
    pub success: bool,
    /// Executed states, starting at home.
    pub states: Vec<RobotJointState>,
}

/// Seeded evaluation episodes with their scripted joint paths.
pub fn eval_episodes(
    task: &ReachTaskConfig,
    cfg: &RetargetConfig,
    eval: &EvalConfig,
) -> Result<Vec<(ReachEpisode, Vec<RobotJointState>)>, EvalError> {
    (0..eval.rollouts)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(eval.seed);
            rng.set_stream(i as u64);
            Ok(sample_feasible_episode(task, cfg, &mut rng)?)
        })
        .collect()
}

pub fn robot_observation(ep: &ReachEpisode, state: &RobotJointState, cfg: &RetargetConfig) -> Observation {
    Observation {
        instruction_id: ep.instruction_id,
        embodiment: Embodiment::Robot,
        scene: ep.scene(),
        proprio: robot_state_vector(state, cfg),
        proprio_mask: ActionMask::robot_sides(&Side::BOTH),
    }
}

fn rollout_seed(seed: u64, rollout: usize, step: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((rollout as u64) << 20)
        .wrapping_add(step as u64)
}

pub fn rollout(
    policy: &dyn ChunkPolicy,
    index: usize,
    ep: &ReachEpisode,
    steps: usize,
    cfg: &RetargetConfig,
    eval: &EvalConfig,
) -> Result<RolloutResult, EvalError> {
    let side = ep.side();
    let chain = cfg.chain(side);
    let k = eval.rows_per_replan(policy.horizon());
    let mask = task_output_mask(ep.instruction_id);
    let mut state = cfg.home;
    let mut states = vec![state];
    let mut t = 0;
    while t < steps {
        let obs = robot_observation(ep, &state, cfg);
        let chunk = policy.act(index, t, &obs, &mask, rollout_seed(eval.seed, index, t))?;
        for row in chunk.rows.iter().take(k) {
            if t >= steps {
                break;
            }
            let q = JointVector::from_slice(&row[dims::joints(side)]);
            let arm = state.arm_mut(side);
            arm.q = if q.is_finite() { chain.clamp(&q) } else { arm.q };
            let g = row[dims::gripper(side)];
            arm.gripper = if g.is_finite() { g.clamp(0.0, 1.0) } else { arm.gripper };
            states.push(state);
            t += 1;
        }
    }
    let fk = forward_kinematics(chain, &state.arm(side).q);
    let final_error = (fk.position - ep.goal).norm();
    Ok(RolloutResult {
        instruction_id: ep.instruction_id,
        final_error,
        success: final_error <= eval.success_tolerance,
        states,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskEval {
    pub task: String,
    pub rollouts: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_final_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub tasks: Vec<TaskEval>,
    pub success_rate: f64,
    pub mean_final_error: f64,
    /// Held-out normalized chunk MSE, when measured.
    pub chunk_mse: Option<f64>,
    /// IK position residuals (m) of the scripted evaluation paths.
    pub ik_mean_residual: f64,
    pub ik_max_residual: f64,
}

impl EvalReport {
    pub fn from_results(results: &[RolloutResult], ik_residuals: &[f64], chunk_mse: Option<f64>) -> Self {
        let mut tasks = Vec::new();
        for (id, name) in TASK_NAMES.iter().enumerate() {
            let r: Vec<&RolloutResult> = results.iter().filter(|r| r.instruction_id as usize == id).collect();
            let successes = r.iter().filter(|x| x.success).count();
            tasks.push(TaskEval {
                task: name.to_string(),
                rollouts: r.len(),
                successes,
                success_rate: ratio(successes, r.len()),
                mean_final_error: mean(r.iter().map(|x| x.final_error)),
            });
        }
        let successes = results.iter().filter(|x| x.success).count();
        Self {
            tasks,
            success_rate: ratio(successes, results.len()),
            mean_final_error: mean(results.iter().map(|x| x.final_error)),
            chunk_mse,
            ik_mean_residual: mean(ik_residuals.iter().copied()),
            ik_max_residual: ik_residuals.iter().copied().fold(0.0, f64::max),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,rollouts,successes,success_rate,mean_final_error\n");
        for t in &self.tasks {
            s.push_str(&format!(
                "{},{},{},{},{:e}\n",
                t.task, t.rollouts, t.successes, t.success_rate, t.mean_final_error
            ));
        }
        let n: usize = self.tasks.iter().map(|t| t.rollouts).sum();
        let k: usize = self.tasks.iter().map(|t| t.successes).sum();
        s.push_str(&format!("all,{n},{k},{},{:e}\n", self.success_rate, self.mean_final_error));
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12} {:>8} {:>9} {:>8} {:>12}\n", "task", "rollouts", "successes", "rate", "final_err_m");
        for t in &self.tasks {
            s.push_str(&format!(
                "{:<12} {:>8} {:>9} {:>8.3} {:>12.5}\n",
                t.task, t.rollouts, t.successes, t.success_rate, t.mean_final_error
            ));
        }
        s.push_str(&format!("overall success rate {:.3}\n", self.success_rate));
        s.push_str(&format!("mean final error     {:.5} m\n", self.mean_final_error));
        if let Some(m) = self.chunk_mse {
            s.push_str(&format!("held-out chunk mse   {m:.6}\n"));
        }
        s.push_str(&format!(
            "ik residual          mean {:.2e} m, max {:.2e} m\n",
            self.ik_mean_residual, self.ik_max_residual
        ));
        s
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// IK position residual of each scripted path step.
fn path_residuals(eps: &[(ReachEpisode, Vec<RobotJointState>)], cfg: &RetargetConfig) -> Vec<f64> {
    eps.iter()
        .flat_map(|(ep, states)| {
            let chain = cfg.chain(ep.side());
            ep.path
                .iter()
                .zip(states)
                .map(move |(p, s)| (forward_kinematics(chain, &s.arm(ep.side()).q).position - p.position).norm())
        })
        .collect()
}

/// Runs `eval.rollouts` seeded rollouts of `policy`.
pub fn evaluate(
    policy: &dyn ChunkPolicy,
    task: &ReachTaskConfig,
    cfg: &RetargetConfig,
    eval: &EvalConfig,
    chunk_mse: Option<f64>,
) -> Result<EvalReport, EvalError> {
    let eps = eval_episodes(task, cfg, eval)?;
    let results: Vec<RolloutResult> = eps
        .par_iter()
        .enumerate()
        .map(|(i, (ep, _))| rollout(policy, i, ep, task.steps, cfg, eval))
        .collect::<Result<_, _>>()?;
    Ok(EvalReport::from_results(&results, &path_residuals(&eps, cfg), chunk_mse))
}

/// Oracle that replays the scripted paths of the evaluation episodes.
pub fn oracle_for(
    task: &ReachTaskConfig,
    cfg: &RetargetConfig,
    eval: &EvalConfig,
    horizon: usize,
) -> Result<OraclePolicy, EvalError> {
    let eps = eval_episodes(task, cfg, eval)?;
    Ok(OraclePolicy {
        horizon,
        paths: eps.into_iter().map(|(_, s)| s).collect(),
        cfg: cfg.clone(),
    })
}
