//! Glue between configuration, data generation, training and evaluation.

use crate::actionspace::{ActionMask, Side};
use crate::config::{ExperimentConfig, SeedStream};
use crate::dataset::{
    augment_complementary, chunk_samples, generate_synthetic_demos, split_by_demo, DatasetError, Demonstration,
    Embodiment, TrainingSample,
};
use crate::policy::train::{action_mse, TrainState};
use crate::policy::{Policy, PolicyError, PolicyNorm, PolicyParams};
use crate::retarget::RetargetConfig;
use rayon::prelude::*;

/// Robot demos (ids `0..n_r`) then human demos, both augmented with the
/// complementary embodiment's actions.
pub fn build_demos(cfg: &ExperimentConfig, rcfg: &RetargetConfig) -> Result<Vec<Demonstration>, DatasetError> {
    let seed = cfg.seed_for(SeedStream::Data);
    let n_r = cfg.data.robot_demos;
    let mut raw = generate_synthetic_demos(&cfg.task, rcfg, Embodiment::Robot, n_r, seed, 0)?;
    raw.extend(generate_synthetic_demos(
        &cfg.task,
        rcfg,
        Embodiment::Human,
        cfg.data.human_demos,
        seed,
        n_r as u32,
    )?);
    raw.par_iter().map(|d| augment_complementary(d, rcfg)).collect()
}

/// (training, held-out) demonstrations.
pub fn split(cfg: &ExperimentConfig, demos: &[Demonstration]) -> (Vec<Demonstration>, Vec<Demonstration>) {
    split_by_demo(demos, cfg.data.heldout_every)
}

pub fn samples(demos: &[Demonstration], horizon: usize, stride: usize) -> Vec<TrainingSample> {
    demos.iter().flat_map(|d| chunk_samples(d, horizon, stride)).collect()
}

pub fn training_samples(cfg: &ExperimentConfig, train: &[Demonstration]) -> Vec<TrainingSample> {
    samples(train, cfg.horizon(), cfg.data.stride)
}

pub fn heldout_samples(cfg: &ExperimentConfig, heldout: &[Demonstration]) -> Vec<TrainingSample> {
    samples(heldout, cfg.horizon(), cfg.data.heldout_stride)
}

/// Untrained policy with normalization fitted on `train`.
pub fn fresh_state(cfg: &ExperimentConfig, train: &[Demonstration]) -> Result<TrainState, PolicyError> {
    let params = PolicyParams::init(&cfg.model, cfg.seed_for(SeedStream::Init))?;
    let norm = PolicyNorm::from_demos(train, cfg.model.scene_dim);
    Ok(TrainState::new(Policy { params, norm }))
}

/// Normalized MSE over every supervised dim of the held-out chunks.
pub fn heldout_mse(cfg: &ExperimentConfig, policy: &Policy, heldout: &[TrainingSample]) -> Result<f64, PolicyError> {
    action_mse(policy, heldout, &ActionMask::all(), cfg.eval.sampler(), cfg.seed_for(SeedStream::Sample))
}

/// Normalized MSE on human dims of robot-sourced held-out chunks.
pub fn human_dims_on_robot_mse(
    cfg: &ExperimentConfig,
    policy: &Policy,
    heldout: &[TrainingSample],
) -> Result<f64, PolicyError> {
    let robot: Vec<TrainingSample> = heldout.iter().filter(|s| s.source == Embodiment::Robot).cloned().collect();
    action_mse(policy, &robot, &ActionMask::human_sides(&Side::BOTH), cfg.eval.sampler(), cfg.seed_for(SeedStream::Sample))
}
