//! Random models and batches for gradient and identity checks.

use super::{Batch, DecoderMode, ModelConfig, PolicyNorm};
use crate::actionspace::{ActionChunk, ActionMask, ActionVector, Side};
use crate::dataset::{Embodiment, TrainingSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform(−1, 1) sample supervising one random side of both embodiments.
pub fn random_sample(rng: &mut impl Rng, h: usize, scene_dim: usize, source: Embodiment) -> TrainingSample {
    let rows: Vec<ActionVector> = (0..h)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect();
    let side = if rng.random::<bool>() { Side::Left } else { Side::Right };
    let mask = ActionMask::robot(side) | ActionMask::human(side);
    TrainingSample {
        demo_id: 0,
        start: 0,
        instruction_id: rng.random_range(0..2),
        scene: (0..scene_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        proprio: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
        proprio_mask: ActionMask::all(),
        target: ActionChunk::new(rows, vec![mask; h], vec![false; h]),
        source,
    }
}

/// `n` random samples alternating robot/human sources, with flow noise in
/// flow mode.
pub fn random_batch(cfg: &ModelConfig, n: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<TrainingSample> = (0..n)
        .map(|i| {
            let src = if i % 2 == 0 { Embodiment::Robot } else { Embodiment::Human };
            random_sample(&mut rng, cfg.horizon, cfg.scene_dim, src)
        })
        .collect();
    let refs: Vec<&TrainingSample> = samples.iter().collect();
    let mut b = Batch::new(&refs, cfg, &PolicyNorm::identity(cfg.scene_dim)).expect("shapes agree");
    if cfg.mode == DecoderMode::Flow {
        b.draw_flow_noise(&mut rng);
    }
    b
}

/// Small model with random widths and depth 1–3.
pub fn random_config(rng: &mut impl Rng) -> ModelConfig {
    let depth = rng.random_range(1..=3);
    ModelConfig {
        mode: if rng.random::<bool>() { DecoderMode::Flow } else { DecoderMode::Regression },
        horizon: rng.random_range(1..=4),
        scene_dim: rng.random_range(1..=6),
        vocab: rng.random_range(2..=3),
        cond_dim: rng.random_range(2..=8),
        cond_hidden: rng.random_range(2..=8),
        hidden: (0..depth).map(|_| rng.random_range(2..=8)).collect(),
    }
}
