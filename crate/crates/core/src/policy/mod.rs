//! Chunked action decoder trained by conditional flow matching (or plain
//! regression) on the unified action space, with hand-written gradients.
//!
//! Network: a condition vector `c = W2·silu(W1·x + b1) + b2 + S·x + E[id]`
//! from the observation `x` (scene, masked proprioception, embodiment
//! one-hot), plus a learned per-row position embedding. Each chunk row is
//! then an independent token `[a_row | c + p_row | t]` through a shared
//! SiLU MLP producing 76 outputs: a velocity in flow mode, the action itself
//! in regression mode (where the row input is zero and `t = 0`).
//!
//! Matrices are column-major with one column per sample or chunk row.

pub mod checkpoint;
pub mod testing;
pub mod train;

use crate::actionspace::{
    canonicalize, ActionChunk, ActionMask, ActionVector, NormStats, ACTION_DIM,
};
use crate::dataset::{compute_norm_stats, Demonstration, Embodiment, TrainingSample};
use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EMBODIMENT_DIM: usize = 2;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("instruction id {id} is outside the vocabulary of {vocab}")]
    UnknownInstruction { id: u32, vocab: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in tensor {tensor} at index {index}")]
    NonFinite { tensor: String, index: usize },
    #[error("non-finite loss at step {step} (l_r2h {l_r2h}, l_h2r {l_h2r})")]
    NonFiniteLoss { step: usize, l_r2h: f64, l_h2r: f64 },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderMode {
    Regression,
    Flow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: DecoderMode,
    pub horizon: usize,
    pub scene_dim: usize,
    pub vocab: usize,
    pub cond_dim: usize,
    pub cond_hidden: usize,
    /// Hidden widths of the row network.
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: DecoderMode::Flow,
            horizon: 16,
            scene_dim: 6,
            vocab: 2,
            cond_dim: 64,
            cond_hidden: 128,
            hidden: vec![128, 128],
        }
    }
}

impl ModelConfig {
    pub fn cond_input_dim(&self) -> usize {
        self.scene_dim + ACTION_DIM + EMBODIMENT_DIM
    }

    pub fn row_input_dim(&self) -> usize {
        ACTION_DIM + self.cond_dim + 1
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::InvalidConfig(m.into()));
        if self.horizon == 0 {
            return bad("horizon must be >= 1");
        }
        if self.vocab == 0 || self.cond_dim == 0 || self.cond_hidden == 0 {
            return bad("vocab, cond_dim and cond_hidden must be >= 1");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden needs at least one layer and no zero widths");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

// Fixed tensor order; row-network layers follow from index FIRST_LAYER.
const EMB: usize = 0;
const W1: usize = 1;
const B1: usize = 2;
const W2: usize = 3;
const B2: usize = 4;
const SKIP: usize = 5;
const POS: usize = 6;
const FIRST_LAYER: usize = 7;

pub fn layout(cfg: &ModelConfig) -> Vec<TensorSpec> {
    let mut specs = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, rows: usize, cols: usize| {
        specs.push(TensorSpec { name, rows, cols, offset });
        offset += rows * cols;
    };
    let (d, ch, inc) = (cfg.cond_dim, cfg.cond_hidden, cfg.cond_input_dim());
    push("embedding".into(), d, cfg.vocab);
    push("cond.w1".into(), ch, inc);
    push("cond.b1".into(), ch, 1);
    push("cond.w2".into(), d, ch);
    push("cond.b2".into(), d, 1);
    push("cond.skip".into(), d, inc);
    push("pos".into(), d, cfg.horizon);
    let mut prev = cfg.row_input_dim();
    for (i, &w) in cfg.hidden.iter().enumerate() {
        push(format!("row.w{i}"), w, prev);
        push(format!("row.b{i}"), w, 1);
        prev = w;
    }
    push("row.out.w".into(), ACTION_DIM, prev);
    push("row.out.b".into(), ACTION_DIM, 1);
    specs
}

/// All network weights in one flat vector with a named-tensor layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: ModelConfig,
    pub layout: Vec<TensorSpec>,
    pub data: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(config: &ModelConfig) -> Result<Self, PolicyError> {
        config.validate()?;
        let layout = layout(config);
        let n = layout.last().map_or(0, |t| t.offset + t.len());
        Ok(Self {
            config: config.clone(),
            layout,
            data: vec![0.0; n],
        })
    }

    /// Weights ~ N(0, 1/fan_in), biases zero, embeddings ~ N(0, 0.1²).
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, PolicyError> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in p.layout.clone() {
            let scale = if spec.name == "embedding" || spec.name == "pos" {
                0.1
            } else if spec.cols == 1 {
                0.0
            } else {
                1.0 / (spec.cols as f64).sqrt()
            };
            for x in &mut p.data[spec.range()] {
                let g: f64 = StandardNormal.sample(&mut rng);
                *x = scale * g;
            }
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.layout.iter().find(|t| t.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<DMatrixView<'_, f64>> {
        self.spec(name).map(|s| view(&self.data, s))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<DMatrixViewMut<'_, f64>> {
        let s = self.spec(name)?.clone();
        Some(DMatrixViewMut::from_slice(&mut self.data[s.range()], s.rows, s.cols))
    }

    fn t(&self, i: usize) -> DMatrixView<'_, f64> {
        view(&self.data, &self.layout[i])
    }

    /// Tensor name owning flat index `i`.
    pub fn tensor_of(&self, i: usize) -> &str {
        self.layout
            .iter()
            .find(|t| t.range().contains(&i))
            .map_or("?", |t| t.name.as_str())
    }

    pub fn check_finite(&self) -> Result<(), PolicyError> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(PolicyError::NonFinite {
                tensor: self.tensor_of(i).to_string(),
                index: i,
            }),
        }
    }

    fn layers(&self) -> usize {
        self.config.hidden.len()
    }
}

fn view<'a>(data: &'a [f64], s: &TensorSpec) -> DMatrixView<'a, f64> {
    DMatrixView::from_slice(&data[s.range()], s.rows, s.cols)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU derivative at `x` given `s = sigmoid(x)`.
fn silu_grad(x: f64, s: f64) -> f64 {
    s * (1.0 + x * (1.0 - s))
}

fn add_bias(m: &mut DMatrix<f64>, b: &DMatrixView<'_, f64>) {
    for mut col in m.column_iter_mut() {
        col += b.column(0);
    }
}

/// Normalization for actions and scene vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNorm {
    pub action: NormStats,
    pub scene_mean: Vec<f64>,
    pub scene_std: Vec<f64>,
}

impl PolicyNorm {
    pub fn identity(scene_dim: usize) -> Self {
        Self {
            action: NormStats::identity(),
            scene_mean: vec![0.0; scene_dim],
            scene_std: vec![1.0; scene_dim],
        }
    }

    pub fn from_demos(demos: &[Demonstration], scene_dim: usize) -> Self {
        let scenes: Vec<&Vec<f64>> = demos.iter().flat_map(|d| d.steps.iter().map(|s| &s.scene)).collect();
        let n = scenes.len().max(1) as f64;
        let mean: Vec<f64> = (0..scene_dim)
            .map(|i| scenes.iter().map(|s| s.get(i).copied().unwrap_or(0.0)).sum::<f64>() / n)
            .collect();
        let std = (0..scene_dim)
            .map(|i| {
                let v = scenes
                    .iter()
                    .map(|s| (s.get(i).copied().unwrap_or(0.0) - mean[i]).powi(2))
                    .sum::<f64>()
                    / n;
                v.sqrt().max(crate::actionspace::STD_FLOOR)
            })
            .collect();
        Self {
            action: compute_norm_stats(demos),
            scene_mean: mean,
            scene_std: std,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub instruction_id: u32,
    pub embodiment: Embodiment,
    pub scene: Vec<f64>,
    pub proprio: ActionVector,
    pub proprio_mask: ActionMask,
}

impl Observation {
    pub fn from_sample(s: &TrainingSample) -> Self {
        Self {
            instruction_id: s.instruction_id,
            embodiment: s.source,
            scene: s.scene.clone(),
            proprio: s.proprio,
            proprio_mask: s.proprio_mask,
        }
    }
}

/// Condition-encoder input: normalized scene, normalized proprioception
/// with masked dims zeroed, embodiment one-hot.
pub fn condition_input(
    cfg: &ModelConfig,
    norm: &PolicyNorm,
    obs: &Observation,
) -> Result<Vec<f64>, PolicyError> {
    if obs.instruction_id as usize >= cfg.vocab {
        return Err(PolicyError::UnknownInstruction {
            id: obs.instruction_id,
            vocab: cfg.vocab,
        });
    }
    if obs.scene.len() != cfg.scene_dim || norm.scene_mean.len() != cfg.scene_dim {
        return Err(PolicyError::ShapeMismatch(format!(
            "scene has {} values, model expects {}",
            obs.scene.len(),
            cfg.scene_dim
        )));
    }
    let mut x = Vec::with_capacity(cfg.cond_input_dim());
    x.extend(
        obs.scene
            .iter()
            .enumerate()
            .map(|(i, v)| (v - norm.scene_mean[i]) / norm.scene_std[i]),
    );
    let p = norm.action.normalize(&obs.proprio);
    x.extend((0..ACTION_DIM).map(|i| if obs.proprio_mask.get(i) { p[i] } else { 0.0 }));
    x.push(f64::from(obs.embodiment == Embodiment::Human));
    x.push(f64::from(obs.embodiment == Embodiment::Robot));
    Ok(x)
}

/// Inputs and targets for one loss evaluation; all action quantities are
/// normalized, `ACTION_DIM × (B·H)` with sample `b`, row `r` at column
/// `b·H + r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub horizon: usize,
    pub cond: DMatrix<f64>,
    pub ids: Vec<usize>,
    pub source: Vec<Embodiment>,
    /// Clean chunk A*, zero on masked dims.
    pub target: DMatrix<f64>,
    /// 1.0 on supervised dims.
    pub mask: DMatrix<f64>,
    /// Noise z (flow mode; zero for regression).
    pub noise: DMatrix<f64>,
    /// Flow time per sample.
    pub t: Vec<f64>,
}

impl Batch {
    /// Batch with zero noise and `t = 0`.
    pub fn new(
        samples: &[&TrainingSample],
        cfg: &ModelConfig,
        norm: &PolicyNorm,
    ) -> Result<Self, PolicyError> {
        let h = cfg.horizon;
        let b = samples.len();
        let mut cond = DMatrix::zeros(cfg.cond_input_dim(), b);
        let mut target = DMatrix::zeros(ACTION_DIM, b * h);
        let mut mask = DMatrix::zeros(ACTION_DIM, b * h);
        let mut ids = Vec::with_capacity(b);
        for (j, s) in samples.iter().enumerate() {
            if s.target.horizon() != h {
                return Err(PolicyError::ShapeMismatch(format!(
                    "sample chunk has {} rows, model horizon is {h}",
                    s.target.horizon()
                )));
            }
            let x = condition_input(cfg, norm, &Observation::from_sample(s))?;
            cond.column_mut(j).copy_from_slice(&x);
            ids.push(s.instruction_id as usize);
            for r in 0..h {
                let a = norm.action.normalize(&s.target.rows[r]);
                let m = &s.target.masks[r];
                for i in 0..ACTION_DIM {
                    if m.get(i) {
                        target[(i, j * h + r)] = a[i];
                        mask[(i, j * h + r)] = 1.0;
                    }
                }
            }
        }
        Ok(Self {
            horizon: h,
            cond,
            ids,
            source: samples.iter().map(|s| s.source).collect(),
            target,
            mask,
            noise: DMatrix::zeros(ACTION_DIM, b * h),
            t: vec![0.0; b],
        })
    }

    /// Draws `t ~ U[0, 1)` per sample, then `z ~ N(0, I)` column by column.
    pub fn draw_flow_noise(&mut self, rng: &mut impl Rng) {
        for t in &mut self.t {
            *t = rng.random::<f64>();
        }
        for z in self.noise.iter_mut() {
            *z = StandardNormal.sample(rng);
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Row-network input actions for `mode`: the masked interpolant
    /// `((1 − t)·z + t·A*) ⊙ m` for flow, zero for regression.
    pub fn network_actions(&self, mode: DecoderMode) -> DMatrix<f64> {
        match mode {
            DecoderMode::Regression => DMatrix::zeros(ACTION_DIM, self.target.ncols()),
            DecoderMode::Flow => {
                let mut x = DMatrix::zeros(ACTION_DIM, self.target.ncols());
                for col in 0..x.ncols() {
                    let t = self.t[col / self.horizon];
                    for i in 0..ACTION_DIM {
                        x[(i, col)] = ((1.0 - t) * self.noise[(i, col)] + t * self.target[(i, col)])
                            * self.mask[(i, col)];
                    }
                }
                x
            }
        }
    }

    /// Regression target A*, or flow target velocity A* − z.
    pub fn output_target(&self, mode: DecoderMode) -> DMatrix<f64> {
        match mode {
            DecoderMode::Regression => self.target.clone(),
            DecoderMode::Flow => &self.target - &self.noise,
        }
    }

    fn row_times(&self, mode: DecoderMode) -> Vec<f64> {
        match mode {
            DecoderMode::Regression => vec![0.0; self.len()],
            DecoderMode::Flow => self.t.clone(),
        }
    }
}

struct CondCache {
    a1: DMatrix<f64>,
    s1: DMatrix<f64>,
    h1: DMatrix<f64>,
    c: DMatrix<f64>,
}

struct RowCache {
    /// Input to each layer, the first being `[x | c + pos | t]`.
    inputs: Vec<DMatrix<f64>>,
    /// Hidden pre-activations and their sigmoids.
    pre: Vec<DMatrix<f64>>,
    sig: Vec<DMatrix<f64>>,
    out: DMatrix<f64>,
}

fn encode(p: &PolicyParams, cond: &DMatrix<f64>, ids: &[usize]) -> CondCache {
    let mut a1 = p.t(W1) * cond;
    add_bias(&mut a1, &p.t(B1));
    let s1 = a1.map(sigmoid);
    let h1 = a1.component_mul(&s1);
    let mut c = p.t(W2) * &h1;
    add_bias(&mut c, &p.t(B2));
    c += p.t(SKIP) * cond;
    let emb = p.t(EMB);
    for (j, &id) in ids.iter().enumerate() {
        let mut col = c.column_mut(j);
        col += emb.column(id);
    }
    CondCache { a1, s1, h1, c }
}

fn row_forward(p: &PolicyParams, c: &DMatrix<f64>, x: &DMatrix<f64>, t: &[f64], h: usize) -> RowCache {
    let d = p.config.cond_dim;
    let n = x.ncols();
    let pos = p.t(POS);
    let mut u = DMatrix::zeros(p.config.row_input_dim(), n);
    for col in 0..n {
        let (b, r) = (col / h, col % h);
        u.view_mut((0, col), (ACTION_DIM, 1)).copy_from(&x.column(col));
        let mut cv = u.view_mut((ACTION_DIM, col), (d, 1));
        cv.copy_from(&c.column(b));
        cv += pos.column(r);
        u[(ACTION_DIM + d, col)] = t[b];
    }
    let mut inputs = vec![u];
    let mut pre = Vec::new();
    let mut sig = Vec::new();
    for l in 0..p.layers() {
        let mut z = p.t(FIRST_LAYER + 2 * l) * inputs.last().unwrap();
        add_bias(&mut z, &p.t(FIRST_LAYER + 2 * l + 1));
        let s = z.map(sigmoid);
        inputs.push(z.component_mul(&s));
        pre.push(z);
        sig.push(s);
    }
    let o = FIRST_LAYER + 2 * p.layers();
    let mut out = p.t(o) * inputs.last().unwrap();
    add_bias(&mut out, &p.t(o + 1));
    RowCache { inputs, pre, sig, out }
}

/// Accumulates `grad[spec] += m`.
fn acc(grad: &mut [f64], spec: &TensorSpec, m: &DMatrix<f64>) {
    for (g, v) in grad[spec.range()].iter_mut().zip(m.iter()) {
        *g += v;
    }
}

fn bias_grad(dz: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(dz.nrows(), 1);
    for col in dz.column_iter() {
        s += col;
    }
    s
}

/// Backpropagates `d_out` (∂loss/∂output) into a flat parameter gradient;
/// also returns ∂loss/∂x for the row-network action input.
fn backward(
    p: &PolicyParams,
    cond: &DMatrix<f64>,
    ids: &[usize],
    cc: &CondCache,
    rc: &RowCache,
    d_out: &DMatrix<f64>,
    h: usize,
) -> (Vec<f64>, DMatrix<f64>) {
    let mut grad = vec![0.0; p.len()];
    let spec = |i: usize| &p.layout[i];
    let o = FIRST_LAYER + 2 * p.layers();
    let mut dz = d_out.clone();
    let mut w_idx = o;
    for l in (0..=p.layers()).rev() {
        let input = &rc.inputs[l];
        acc(&mut grad, spec(w_idx), &(&dz * input.transpose()));
        acc(&mut grad, spec(w_idx + 1), &bias_grad(&dz));
        let du = p.t(w_idx).transpose() * &dz;
        if l == 0 {
            dz = du;
            break;
        }
        let (z, sg) = (&rc.pre[l - 1], &rc.sig[l - 1]);
        dz = DMatrix::from_fn(du.nrows(), du.ncols(), |i, j| du[(i, j)] * silu_grad(z[(i, j)], sg[(i, j)]));
        w_idx -= 2;
    }
    // dz now holds ∂loss/∂u for the first row-network input.
    let d = p.config.cond_dim;
    let b = ids.len();
    let d_x = dz.rows(0, ACTION_DIM).into_owned();
    let mut dc = DMatrix::zeros(d, b);
    let mut dpos = DMatrix::zeros(d, h);
    for col in 0..dz.ncols() {
        let g = dz.view((ACTION_DIM, col), (d, 1));
        let mut c1 = dc.column_mut(col / h);
        c1 += &g;
        let mut p1 = dpos.column_mut(col % h);
        p1 += &g;
    }
    acc(&mut grad, spec(POS), &dpos);

    let mut demb = DMatrix::zeros(d, p.config.vocab);
    for (j, &id) in ids.iter().enumerate() {
        let mut col = demb.column_mut(id);
        col += dc.column(j);
    }
    acc(&mut grad, spec(EMB), &demb);
    acc(&mut grad, spec(SKIP), &(&dc * cond.transpose()));
    acc(&mut grad, spec(W2), &(&dc * cc.h1.transpose()));
    acc(&mut grad, spec(B2), &bias_grad(&dc));
    let g1 = p.t(W2).transpose() * &dc;
    let da1 = DMatrix::from_fn(g1.nrows(), g1.ncols(), |i, j| g1[(i, j)] * silu_grad(cc.a1[(i, j)], cc.s1[(i, j)]));
    acc(&mut grad, spec(W1), &(&da1 * cond.transpose()));
    acc(&mut grad, spec(B1), &bias_grad(&da1));
    (grad, d_x)
}

/// Condition vector for one observation.
pub fn encode_condition(
    params: &PolicyParams,
    norm: &PolicyNorm,
    obs: &Observation,
) -> Result<DVector<f64>, PolicyError> {
    let x = condition_input(&params.config, norm, obs)?;
    let cond = DMatrix::from_column_slice(x.len(), 1, &x);
    let cc = encode(params, &cond, &[obs.instruction_id as usize]);
    Ok(cc.c.column(0).into_owned())
}

/// Row-network output for one chunk `x` (`ACTION_DIM × H`) at time `t`
/// under condition `c`.
pub fn velocity_field(params: &PolicyParams, x: &DMatrix<f64>, t: f64, c: &DVector<f64>) -> DMatrix<f64> {
    let c = DMatrix::from_column_slice(c.len(), 1, c.as_slice());
    row_forward(params, &c, x, &[t], x.ncols()).out
}

/// Vector–Jacobian product of [`velocity_field`] with respect to `x`.
pub fn velocity_field_vjp(
    params: &PolicyParams,
    x: &DMatrix<f64>,
    t: f64,
    c: &DVector<f64>,
    cotangent: &DMatrix<f64>,
) -> DMatrix<f64> {
    // A dummy encoder pass supplies caches; the condition gradient is unused.
    let cond = DMatrix::zeros(params.config.cond_input_dim(), 1);
    let cc = CondCache {
        a1: DMatrix::zeros(params.config.cond_hidden, 1),
        s1: DMatrix::from_element(params.config.cond_hidden, 1, 0.5),
        h1: DMatrix::zeros(params.config.cond_hidden, 1),
        c: DMatrix::from_column_slice(c.len(), 1, c.as_slice()),
    };
    let rc = row_forward(params, &cc.c, x, &[t], x.ncols());
    backward(params, &cond, &[0], &cc, &rc, cotangent, x.ncols()).1
}

/// Per-source loss terms. `total` is always `l_r2h + l_h2r`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_r2h: f64,
    pub l_h2r: f64,
    pub total: f64,
}

/// Which objectives contribute; disabling one zeroes its term and gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub r2h: bool,
    pub h2r: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { r2h: true, h2r: true }
    }
}

/// Squared-error grouping shared by both decoder modes: robot-sourced
/// columns feed `l_r2h`, human-sourced ones `l_h2r`, both divided by the
/// batch's supervised-entry count. Returns the breakdown and the residual
/// scaled to ∂total/∂prediction.
pub fn grouped_squared_error(
    pred: &DMatrix<f64>,
    target: &DMatrix<f64>,
    mask: &DMatrix<f64>,
    source: &[Embodiment],
    horizon: usize,
    loss: &LossConfig,
) -> (LossBreakdown, DMatrix<f64>) {
    let count: f64 = mask.iter().sum();
    let mut sse = [0.0, 0.0];
    let mut d_out = DMatrix::zeros(pred.nrows(), pred.ncols());
    if count == 0.0 {
        return (LossBreakdown::default(), d_out);
    }
    for col in 0..pred.ncols() {
        let robot = source[col / horizon] == Embodiment::Robot;
        let enabled = if robot { loss.r2h } else { loss.h2r };
        if !enabled {
            continue;
        }
        let g = usize::from(!robot);
        for i in 0..pred.nrows() {
            if mask[(i, col)] != 0.0 {
                let e = pred[(i, col)] - target[(i, col)];
                sse[g] += e * e;
                d_out[(i, col)] = 2.0 * e / count;
            }
        }
    }
    let l_r2h = sse[0] / count;
    let l_h2r = sse[1] / count;
    (
        LossBreakdown {
            l_r2h,
            l_h2r,
            total: l_r2h + l_h2r,
        },
        d_out,
    )
}

fn run(
    params: &PolicyParams,
    batch: &Batch,
    loss: &LossConfig,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>), PolicyError> {
    params.check_finite()?;
    let cfg = &params.config;
    if batch.horizon != cfg.horizon || batch.cond.nrows() != cfg.cond_input_dim() {
        return Err(PolicyError::ShapeMismatch("batch does not match model configuration".into()));
    }
    if let Some(&id) = batch.ids.iter().find(|&&id| id >= cfg.vocab) {
        return Err(PolicyError::UnknownInstruction {
            id: id as u32,
            vocab: cfg.vocab,
        });
    }
    if batch.is_empty() {
        return Ok((LossBreakdown::default(), with_grad.then(|| vec![0.0; params.len()])));
    }
    let cc = encode(params, &batch.cond, &batch.ids);
    let x = batch.network_actions(cfg.mode);
    let rc = row_forward(params, &cc.c, &x, &batch.row_times(cfg.mode), batch.horizon);
    let (lb, d_out) = grouped_squared_error(
        &rc.out,
        &batch.output_target(cfg.mode),
        &batch.mask,
        &batch.source,
        batch.horizon,
        loss,
    );
    let grad = with_grad.then(|| backward(params, &batch.cond, &batch.ids, &cc, &rc, &d_out, batch.horizon).0);
    Ok((lb, grad))
}

/// Mutual-imitation objective and its gradient.
pub fn mutual_imitation_loss(
    params: &PolicyParams,
    batch: &Batch,
    loss: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>), PolicyError> {
    let (lb, g) = run(params, batch, loss, true)?;
    Ok((lb, g.expect("gradient requested")))
}

pub fn loss_value(params: &PolicyParams, batch: &Batch, loss: &LossConfig) -> Result<LossBreakdown, PolicyError> {
    Ok(run(params, batch, loss, false)?.0)
}

/// Mean squared velocity error over supervised entries (flow mode), with
/// gradient.
pub fn cfm_loss(params: &PolicyParams, batch: &Batch) -> Result<(f64, Vec<f64>), PolicyError> {
    let (lb, g) = mutual_imitation_loss(params, batch, &LossConfig::default())?;
    Ok((lb.total, g))
}

pub fn grad_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Deliberate corruption of one tensor's analytic gradient, for exercising
/// the checker.
#[derive(Debug, Clone, PartialEq)]
pub struct GradFault {
    pub tensor: String,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    /// Max relative error per tensor, in layout order.
    pub per_tensor: Vec<(String, f64)>,
    pub coordinates: usize,
}

/// Relative error with the 1e-12 denominator floor: 0 when both sides are
/// below it.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-12 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

pub const DEFAULT_GRAD_EPS: f64 = 1e-4;

/// Fourth-order central differences on `n_coords` coordinates spread
/// round-robin over the tensors versus the analytic gradient of the total
/// loss.
pub fn grad_check(
    params: &PolicyParams,
    batch: &Batch,
    loss: &LossConfig,
    eps: f64,
    n_coords: usize,
    seed: u64,
    fault: Option<&GradFault>,
) -> Result<GradCheckReport, PolicyError> {
    if !(eps > 0.0) {
        return Err(PolicyError::InvalidConfig("eps must be positive".into()));
    }
    let (_, mut grad) = mutual_imitation_loss(params, batch, loss)?;
    if let Some(f) = fault {
        let spec = params
            .spec(&f.tensor)
            .ok_or_else(|| PolicyError::InvalidConfig(format!("no tensor named {}", f.tensor)))?;
        for g in &mut grad[spec.range()] {
            *g = *g * f.scale + 1e-3;
        }
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(PolicyError::NonFinite {
            tensor: params.tensor_of(i).to_string(),
            index: i,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_tensor: Vec<(String, f64)> = params.layout.iter().map(|t| (t.name.clone(), 0.0)).collect();
    let mut worst = (0.0, 0usize, 0usize);
    let mut probe = params.clone();
    let total = |p: &PolicyParams| loss_value(p, batch, loss).map(|l| l.total);
    for k in 0..n_coords {
        let ti = k % params.layout.len();
        let spec = &params.layout[ti];
        let i = spec.offset + rng.random_range(0..spec.len());
        let orig = probe.data[i];
        let mut at = |h: f64| {
            probe.data[i] = orig + h;
            total(&probe)
        };
        let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
        probe.data[i] = orig;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
        if !numeric.is_finite() {
            return Err(PolicyError::NonFinite {
                tensor: spec.name.clone(),
                index: i,
            });
        }
        let rel = relative_error(grad[i], numeric);
        if rel > per_tensor[ti].1 {
            per_tensor[ti].1 = rel;
        }
        if rel > worst.0 {
            worst = (rel, ti, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_tensor: params.layout[worst.1].name.clone(),
        worst_index: worst.2,
        per_tensor,
        coordinates: n_coords,
    })
}

/// A velocity field over normalized chunks (`ACTION_DIM × H`).
pub trait VelocityField {
    fn velocity(&self, x: &DMatrix<f64>, t: f64) -> DMatrix<f64>;
}

/// The network's field under a fixed condition vector.
pub struct ConditionedField<'a> {
    pub params: &'a PolicyParams,
    pub condition: DVector<f64>,
}

impl VelocityField for ConditionedField<'_> {
    fn velocity(&self, x: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        velocity_field(self.params, x, t, &self.condition)
    }
}

/// Euler integration of `dA/dt = v(A, t)` from `t = 0` to 1 in `n_steps`
/// equal steps, holding entries outside `mask` at zero.
pub fn integrate_euler(field: &dyn VelocityField, z: &DMatrix<f64>, mask: &DMatrix<f64>, n_steps: usize) -> DMatrix<f64> {
    let n = n_steps.max(1);
    let dt = 1.0 / n as f64;
    let mut a = z.component_mul(mask);
    for k in 0..n {
        let v = field.velocity(&a, k as f64 * dt);
        a += v * dt;
        a.component_mul_assign(mask);
    }
    a
}

/// Trained network plus the normalization it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub params: PolicyParams,
    pub norm: PolicyNorm,
}

/// Flow-mode inference settings; regression mode ignores them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampler {
    pub flow_steps: usize,
    /// Scale of the initial noise; 0 integrates from the prior mean.
    pub noise_scale: f64,
}

impl Default for Sampler {
    fn default() -> Self {
        Self {
            flow_steps: 10,
            noise_scale: 1.0,
        }
    }
}

impl Policy {
    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    /// Normalized chunk prediction: one forward pass in regression mode,
    /// Euler sampling from seeded, scaled noise in flow mode.
    pub fn predict_normalized(
        &self,
        obs: &Observation,
        mask: &ActionMask,
        sampler: Sampler,
        seed: u64,
    ) -> Result<DMatrix<f64>, PolicyError> {
        let h = self.config().horizon;
        let c = encode_condition(&self.params, &self.norm, obs)?;
        let m = DMatrix::from_fn(ACTION_DIM, h, |i, _| f64::from(mask.get(i)));
        match self.config().mode {
            DecoderMode::Regression => {
                let x = DMatrix::zeros(ACTION_DIM, h);
                Ok(velocity_field(&self.params, &x, 0.0, &c).component_mul(&m))
            }
            DecoderMode::Flow => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let z = DMatrix::from_fn(ACTION_DIM, h, |_, _| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    sampler.noise_scale * v
                });
                let field = ConditionedField {
                    params: &self.params,
                    condition: c,
                };
                Ok(integrate_euler(&field, &z, &m, sampler.flow_steps))
            }
        }
    }

    /// Denormalized, canonicalized chunk. Dims outside `mask` are left at
    /// the dataset mean and reported unsupervised.
    pub fn sample_actions(
        &self,
        obs: &Observation,
        mask: &ActionMask,
        sampler: Sampler,
        seed: u64,
    ) -> Result<ActionChunk, PolicyError> {
        let a = self.predict_normalized(obs, mask, sampler, seed)?;
        Ok(denormalize_chunk(&a, &self.norm.action, mask))
    }
}

pub fn denormalize_chunk(a: &DMatrix<f64>, norm: &NormStats, mask: &ActionMask) -> ActionChunk {
    let h = a.ncols();
    let rows = (0..h)
        .map(|r| {
            let v: ActionVector = std::array::from_fn(|i| a[(i, r)]);
            let mut out = norm.denormalize(&v);
            canonicalize(&mut out);
            out
        })
        .collect();
    ActionChunk::new(rows, vec![*mask; h], vec![false; h])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actionspace::Side;

    pub(crate) fn tiny_config(mode: DecoderMode) -> ModelConfig {
        ModelConfig {
            mode,
            horizon: 3,
            scene_dim: 2,
            vocab: 2,
            cond_dim: 4,
            cond_hidden: 5,
            hidden: vec![6, 5],
        }
    }

    pub(crate) use super::testing::{random_batch, random_sample};

    #[test]
    fn zero_weights_give_zero_condition_and_field() {
        let cfg = tiny_config(DecoderMode::Flow);
        let p = PolicyParams::zeros(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_sample(&mut rng, 3, 2, Embodiment::Robot);
        let c = encode_condition(&p, &PolicyNorm::identity(2), &Observation::from_sample(&s)).unwrap();
        assert!(c.iter().all(|&v| v == 0.0));
        let x = DMatrix::from_fn(ACTION_DIM, 3, |i, j| (i + j) as f64);
        let v = velocity_field(&p, &x, 0.3, &c);
        assert_eq!(v.shape(), (ACTION_DIM, 3));
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn skip_projection_passes_input_through() {
        let cfg = tiny_config(DecoderMode::Flow);
        let mut p = PolicyParams::zeros(&cfg).unwrap();
        let mut skip = p.tensor_mut("cond.skip").unwrap();
        for k in 0..4 {
            skip[(k, k)] = 1.0;
        }
        let obs = Observation {
            instruction_id: 1,
            embodiment: Embodiment::Human,
            scene: vec![0.25, -0.5],
            proprio: [3.0; ACTION_DIM],
            proprio_mask: ActionMask::all(),
        };
        let c = encode_condition(&p, &PolicyNorm::identity(2), &obs).unwrap();
        assert_eq!(c.as_slice(), &[0.25, -0.5, 3.0, 3.0]);
    }

    #[test]
    fn unknown_instruction_is_rejected() {
        let cfg = tiny_config(DecoderMode::Flow);
        let p = PolicyParams::zeros(&cfg).unwrap();
        let obs = Observation {
            instruction_id: 7,
            embodiment: Embodiment::Robot,
            scene: vec![0.0; 2],
            proprio: [0.0; ACTION_DIM],
            proprio_mask: ActionMask::none(),
        };
        assert!(matches!(
            encode_condition(&p, &PolicyNorm::identity(2), &obs),
            Err(PolicyError::UnknownInstruction { id: 7, vocab: 2 })
        ));
    }

    #[test]
    fn velocity_input_jacobian_matches_differences() {
        let cfg = ModelConfig {
            hidden: vec![2],
            ..tiny_config(DecoderMode::Flow)
        };
        let p = PolicyParams::init(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = DVector::from_fn(cfg.cond_dim, |_, _| rng.random_range(-1.0..1.0));
        let x = DMatrix::from_fn(ACTION_DIM, 3, |_, _| rng.random_range(-1.0..1.0));
        let eps = 1e-6;
        for (oi, oc) in [(0, 0), (17, 1), (75, 2)] {
            let mut cot = DMatrix::zeros(ACTION_DIM, 3);
            cot[(oi, oc)] = 1.0;
            let row = velocity_field_vjp(&p, &x, 0.4, &c, &cot);
            for (ii, ic) in [(0, 0), (5, 1), (40, 2), (75, 0)] {
                let mut xp = x.clone();
                xp[(ii, ic)] += eps;
                let mut xm = x.clone();
                xm[(ii, ic)] -= eps;
                let fd = (velocity_field(&p, &xp, 0.4, &c)[(oi, oc)] - velocity_field(&p, &xm, 0.4, &c)[(oi, oc)])
                    / (2.0 * eps);
                assert!((row[(ii, ic)] - fd).abs() < 1e-8, "{} vs {}", row[(ii, ic)], fd);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for mode in [DecoderMode::Flow, DecoderMode::Regression] {
            let cfg = tiny_config(mode);
            for seed in 0..10 {
                let p = PolicyParams::init(&cfg, seed).unwrap();
                let b = random_batch(&cfg, 4, seed + 100);
                let r = grad_check(&p, &b, &LossConfig::default(), DEFAULT_GRAD_EPS, 200, seed, None).unwrap();
                assert!(r.max_rel_error < 1e-4, "{mode:?}: {r:?}");
            }
        }
    }

    #[test]
    fn tiny_step_is_roundoff_limited_but_close() {
        // At eps = 1e-6 coordinates with gradients near 1e-7 lose digits to
        // rounding in the loss itself.
        let cfg = tiny_config(DecoderMode::Flow);
        let p = PolicyParams::init(&cfg, 9).unwrap();
        let b = random_batch(&cfg, 4, 5);
        let r = grad_check(&p, &b, &LossConfig::default(), 1e-6, 200, 0, None).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn condition_gradient_matches_differences() {
        let cfg = tiny_config(DecoderMode::Flow);
        let p = PolicyParams::init(&cfg, 2).unwrap();
        let b = random_batch(&cfg, 3, 8);
        let r = grad_check(&p, &b, &LossConfig::default(), 1e-3, 400, 1, None).unwrap();
        for (name, e) in &r.per_tensor {
            if name.starts_with("cond") || name == "embedding" {
                assert!(*e < 1e-6, "{name}: {e}");
            }
        }
    }

    #[test]
    fn injected_fault_is_named() {
        let cfg = tiny_config(DecoderMode::Flow);
        let p = PolicyParams::init(&cfg, 9).unwrap();
        let b = random_batch(&cfg, 4, 5);
        let fault = GradFault {
            tensor: "row.w1".into(),
            scale: 1.5,
        };
        let r = grad_check(&p, &b, &LossConfig::default(), 1e-6, 200, 0, Some(&fault)).unwrap();
        assert!(r.max_rel_error > 1e-2);
        assert_eq!(r.worst_tensor, "row.w1");
    }

    #[test]
    fn nan_weight_is_reported() {
        let cfg = tiny_config(DecoderMode::Flow);
        let mut p = PolicyParams::init(&cfg, 9).unwrap();
        let at = p.spec("row.b0").unwrap().offset + 2;
        p.data[at] = f64::NAN;
        let b = random_batch(&cfg, 2, 5);
        match grad_check(&p, &b, &LossConfig::default(), 1e-6, 10, 0, None) {
            Err(PolicyError::NonFinite { tensor, .. }) => assert_eq!(tensor, "row.b0"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn planted_optimum_has_zero_gradient_check() {
        let cfg = tiny_config(DecoderMode::Flow);
        let p = PolicyParams::zeros(&cfg).unwrap();
        let mut b = random_batch(&cfg, 4, 5);
        b.noise = b.target.clone();
        let (l, g) = cfm_loss(&p, &b).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        let r = grad_check(&p, &b, &LossConfig::default(), 1e-6, 50, 0, None).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn loss_is_sum_of_terms_and_ablation_zeroes_one() {
        let cfg = tiny_config(DecoderMode::Flow);
        let p = PolicyParams::init(&cfg, 1).unwrap();
        let b = random_batch(&cfg, 6, 2);
        let (full, _) = mutual_imitation_loss(&p, &b, &LossConfig::default()).unwrap();
        assert_eq!(full.total, full.l_r2h + full.l_h2r);
        assert!(full.l_r2h > 0.0 && full.l_h2r > 0.0);
        let (abl, _) = mutual_imitation_loss(&p, &b, &LossConfig { r2h: false, h2r: true }).unwrap();
        assert_eq!(abl.l_r2h, 0.0);
        assert_eq!(abl.l_h2r.to_bits(), full.l_h2r.to_bits());
    }

    #[test]
    fn mask_invariance() {
        let cfg = tiny_config(DecoderMode::Flow);
        let p = PolicyParams::init(&cfg, 1).unwrap();
        let b = random_batch(&cfg, 4, 2);
        let mut b2 = b.clone();
        for (t, m) in b2.target.iter_mut().zip(b.mask.iter()) {
            if *m == 0.0 {
                *t += 17.0;
            }
        }
        let (l1, g1) = mutual_imitation_loss(&p, &b, &LossConfig::default()).unwrap();
        let (l2, g2) = mutual_imitation_loss(&p, &b2, &LossConfig::default()).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn planted_linear_field_recovers_target_in_one_step() {
        struct Oracle(DMatrix<f64>);
        impl VelocityField for Oracle {
            fn velocity(&self, x: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
                (&self.0 - x) / (1.0 - t)
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = DMatrix::from_fn(ACTION_DIM, 4, |_, _| rng.random_range(-2.0..2.0));
        let z = DMatrix::from_fn(ACTION_DIM, 4, |_, _| rng.random_range(-2.0..2.0));
        let ones = DMatrix::from_element(ACTION_DIM, 4, 1.0);
        let out = integrate_euler(&Oracle(a.clone()), &z, &ones, 1);
        assert!((out - a).amax() < 1e-15);
    }

    #[test]
    fn sampling_is_deterministic_with_unit_quaternions() {
        let cfg = tiny_config(DecoderMode::Flow);
        let policy = Policy {
            params: PolicyParams::init(&cfg, 4).unwrap(),
            norm: PolicyNorm::identity(2),
        };
        let obs = Observation {
            instruction_id: 0,
            embodiment: Embodiment::Robot,
            scene: vec![0.1, 0.2],
            proprio: [0.0; ACTION_DIM],
            proprio_mask: ActionMask::robot_sides(&Side::BOTH),
        };
        let mask = ActionMask::all();
        let s = Sampler {
            flow_steps: 8,
            noise_scale: 1.0,
        };
        let a = policy.sample_actions(&obs, &mask, s, 11).unwrap();
        let b = policy.sample_actions(&obs, &mask, s, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.horizon(), 3);
        for row in &a.rows {
            for side in Side::BOTH {
                let q = &row[crate::actionspace::dims::eef_quat(side)];
                let n: f64 = q.iter().map(|x| x * x).sum();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }
}
