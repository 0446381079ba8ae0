//! AdamW training loop with a linear-warmup constant schedule.

use super::{
    grad_norm, mutual_imitation_loss, Batch, DecoderMode, LossBreakdown, LossConfig, Observation, Policy,
    PolicyError, PolicyParams, Sampler,
};
use crate::actionspace::{ActionMask, ACTION_DIM};
use crate::dataset::TrainingSample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_fraction: f64,
    /// Decay of the parameter moving average used for evaluation; 0 keeps
    /// the raw parameters.
    pub ema_decay: f64,
    /// Derived from the experiment seed, never read from a file.
    #[serde(skip)]
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_fraction: 0.02,
            ema_decay: 0.999,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn warmup_steps(&self) -> usize {
        ((self.steps as f64 * self.warmup_fraction).ceil() as usize).max(1)
    }

    /// Learning rate used at (0-based) `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        if step < w {
            self.lr * (step + 1) as f64 / w as f64
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("betas must lie in [0, 1) and adam_eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One decoupled-weight-decay Adam update; `step` is 0-based.
pub fn adamw_update(params: &mut [f64], grad: &[f64], state: &mut AdamState, step: usize, lr: f64, cfg: &TrainConfig) {
    let k = (step + 1) as i32;
    let c1 = 1.0 - cfg.beta1.powi(k);
    let c2 = 1.0 - cfg.beta2.powi(k);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        if lr == 0.0 {
            continue;
        }
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * (cfg.weight_decay * params[i] + mhat / (vhat.sqrt() + cfg.adam_eps));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub l_r2h: f64,
    pub l_h2r: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,l_r2h,l_h2r,total,grad_norm,lr";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.l_r2h, self.l_h2r, self.total, self.grad_norm, self.lr
        )
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub policy: Policy,
    pub adam: AdamState,
    /// Number of completed steps.
    pub step: usize,
    /// Moving average of the parameters.
    pub ema: Vec<f64>,
}

impl TrainState {
    pub fn new(policy: Policy) -> Self {
        let n = policy.params.len();
        Self {
            ema: policy.params.data.clone(),
            policy,
            adam: AdamState::new(n),
            step: 0,
        }
    }

    /// The averaged parameters with the training normalization.
    pub fn averaged_policy(&self) -> Policy {
        let mut p = self.policy.clone();
        p.params.data.clone_from(&self.ema);
        p
    }
}

/// Averaging weight at (0-based) `step`; ramps up so early iterates fade fast.
pub fn ema_weight(decay: f64, step: usize) -> f64 {
    decay.min((1.0 + step as f64) / (10.0 + step as f64))
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Draws the batch for `step`: indices with replacement, then flow noise.
pub fn draw_batch(
    samples: &[TrainingSample],
    params: &PolicyParams,
    policy: &Policy,
    cfg: &TrainConfig,
    step: usize,
) -> Result<Batch, PolicyError> {
    let mut rng = step_rng(cfg.seed, step);
    let picks: Vec<&TrainingSample> = (0..cfg.batch_size)
        .map(|_| &samples[rng.random_range(0..samples.len())])
        .collect();
    let mut batch = Batch::new(&picks, &params.config, &policy.norm)?;
    if params.config.mode == DecoderMode::Flow {
        batch.draw_flow_noise(&mut rng);
    }
    Ok(batch)
}

/// Runs steps `state.step .. until`, calling `on_step` after each. Each
/// step's randomness depends only on `(cfg.seed, step)`, so stopping and
/// resuming from a saved state reproduces an uninterrupted run.
pub fn train(
    state: &mut TrainState,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
    until: usize,
    mut on_step: impl FnMut(&MetricsRow, &TrainState),
) -> Result<(), PolicyError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(PolicyError::InvalidConfig("training set is empty".into()));
    }
    while state.step < until {
        let step = state.step;
        let batch = draw_batch(samples, &state.policy.params, &state.policy, cfg, step)?;
        let (lb, grad) = mutual_imitation_loss(&state.policy.params, &batch, &cfg.loss)?;
        let gn = grad_norm(&grad);
        if !lb.total.is_finite() || !gn.is_finite() {
            return Err(PolicyError::NonFiniteLoss {
                step,
                l_r2h: lb.l_r2h,
                l_h2r: lb.l_h2r,
            });
        }
        let lr = cfg.lr_at(step);
        adamw_update(&mut state.policy.params.data, &grad, &mut state.adam, step, lr, cfg);
        let d = ema_weight(cfg.ema_decay, step);
        for (e, p) in state.ema.iter_mut().zip(&state.policy.params.data) {
            *e = d * *e + (1.0 - d) * p;
        }
        state.step += 1;
        let row = MetricsRow {
            step,
            l_r2h: lb.l_r2h,
            l_h2r: lb.l_h2r,
            total: lb.total,
            grad_norm: gn,
            lr,
        };
        on_step(&row, state);
    }
    Ok(())
}

/// Union of a sample's row masks.
pub fn chunk_mask(s: &TrainingSample) -> ActionMask {
    s.target.masks.iter().fold(ActionMask::none(), |a, &m| a | m)
}

/// Mean normalized squared error between predicted and target chunks over
/// entries supervised in the target and selected by `select`. Flow-mode
/// predictions draw their noise seeded per sample.
pub fn action_mse(
    policy: &Policy,
    samples: &[TrainingSample],
    select: &ActionMask,
    sampler: Sampler,
    seed: u64,
) -> Result<f64, PolicyError> {
    let parts: Vec<(f64, usize)> = samples
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            let obs = Observation::from_sample(s);
            let pred = policy.predict_normalized(&obs, &chunk_mask(s), sampler, seed.wrapping_add(k as u64))?;
            let mut sse = 0.0;
            let mut n = 0;
            for (r, row) in s.target.rows.iter().enumerate() {
                let a = policy.norm.action.normalize(row);
                let m = s.target.masks[r] & *select;
                for i in 0..ACTION_DIM {
                    if m.get(i) {
                        sse += (pred[(i, r)] - a[i]).powi(2);
                        n += 1;
                    }
                }
            }
            Ok((sse, n))
        })
        .collect::<Result<_, PolicyError>>()?;
    let (sse, n) = parts.iter().fold((0.0, 0), |(a, b), (s, n)| (a + s, b + n));
    Ok(if n == 0 { 0.0 } else { sse / n as f64 })
}

/// Mean loss over fixed batches of `samples` (noise seeded by `seed`).
pub fn mean_loss(
    policy: &Policy,
    samples: &[TrainingSample],
    loss: &LossConfig,
    batch_size: usize,
    seed: u64,
) -> Result<LossBreakdown, PolicyError> {
    let mut acc = LossBreakdown::default();
    let mut n = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&TrainingSample> = chunk.iter().collect();
        let mut b = Batch::new(&refs, &policy.params.config, &policy.norm)?;
        if policy.params.config.mode == DecoderMode::Flow {
            b.draw_flow_noise(&mut rng);
        }
        let l = super::loss_value(&policy.params, &b, loss)?;
        acc.l_r2h += l.l_r2h;
        acc.l_h2r += l.l_h2r;
        n += 1.0;
    }
    if n > 0.0 {
        acc.l_r2h /= n;
        acc.l_h2r /= n;
    }
    acc.total = acc.l_r2h + acc.l_h2r;
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::super::tests::{random_sample, tiny_config};
    use super::super::{PolicyNorm, PolicyParams};
    use super::*;
    use crate::dataset::Embodiment;

    fn setup(mode: DecoderMode) -> (TrainState, Vec<TrainingSample>) {
        let cfg = tiny_config(mode);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let samples: Vec<TrainingSample> = (0..8)
            .map(|i| {
                let src = if i % 2 == 0 { Embodiment::Robot } else { Embodiment::Human };
                random_sample(&mut rng, cfg.horizon, cfg.scene_dim, src)
            })
            .collect();
        let policy = Policy {
            params: PolicyParams::init(&cfg, 1).unwrap(),
            norm: PolicyNorm::identity(cfg.scene_dim),
        };
        (TrainState::new(policy), samples)
    }

    #[test]
    fn warmup_schedule() {
        let cfg = TrainConfig {
            steps: 100,
            lr: 1.0,
            ..Default::default()
        };
        assert_eq!(cfg.warmup_steps(), 2);
        assert_eq!(cfg.lr_at(0), 0.5);
        assert_eq!(cfg.lr_at(1), 1.0);
        assert_eq!(cfg.lr_at(99), 1.0);
    }

    #[test]
    fn zero_lr_zero_decay_leaves_params_bit_identical() {
        let (mut st, samples) = setup(DecoderMode::Flow);
        let before = st.policy.params.data.clone();
        let cfg = TrainConfig {
            steps: 1,
            lr: 0.0,
            weight_decay: 0.0,
            batch_size: 4,
            ..Default::default()
        };
        train(&mut st, &samples, &cfg, 1, |_, _| {}).unwrap();
        assert_eq!(st.policy.params.data, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = TrainConfig {
            steps: 10,
            lr: 1e-2,
            batch_size: 4,
            ..Default::default()
        };
        let (mut a, samples) = setup(DecoderMode::Flow);
        let mut log_a = Vec::new();
        train(&mut a, &samples, &cfg, 10, |r, _| log_a.push(r.csv_line())).unwrap();

        let (mut b, _) = setup(DecoderMode::Flow);
        let mut log_b = Vec::new();
        train(&mut b, &samples, &cfg, 4, |r, _| log_b.push(r.csv_line())).unwrap();
        let mut resumed = b.clone();
        train(&mut resumed, &samples, &cfg, 10, |r, _| log_b.push(r.csv_line())).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(a, resumed);
    }

    #[test]
    fn training_reduces_loss() {
        for mode in [DecoderMode::Regression, DecoderMode::Flow] {
            let (mut st, samples) = setup(mode);
            let cfg = TrainConfig {
                steps: 300,
                lr: 1e-2,
                batch_size: 8,
                ..Default::default()
            };
            let mut first = None;
            let mut last = 0.0;
            train(&mut st, &samples, &cfg, 300, |r, _| {
                first.get_or_insert(r.total);
                last = r.total;
            })
            .unwrap();
            let bound = if mode == DecoderMode::Regression { 0.5 } else { 0.9 };
            assert!(last < bound * first.unwrap(), "{mode:?}: {first:?} -> {last}");
        }
    }

    #[test]
    fn ablation_zeroes_r2h_column() {
        let (mut st, samples) = setup(DecoderMode::Flow);
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 4,
            loss: LossConfig { r2h: false, h2r: true },
            ..Default::default()
        };
        let mut rows = Vec::new();
        train(&mut st, &samples, &cfg, 5, |r, _| rows.push(*r)).unwrap();
        assert!(rows.iter().all(|r| r.l_r2h == 0.0 && r.total == r.l_h2r));
    }
}
