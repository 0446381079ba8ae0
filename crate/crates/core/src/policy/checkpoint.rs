//! Checkpoint file: magic, version, a TOML metadata block, then named
//! little-endian tensors (parameters, normalization, optimizer moments,
//! parameter average).

use super::train::{AdamState, TrainState};
use super::{ModelConfig, Policy, PolicyError, PolicyNorm, PolicyParams};
use crate::actionspace::ACTION_DIM;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XMIMCK\0\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    step: usize,
    model: ModelConfig,
}

fn err(m: impl Into<String>) -> PolicyError {
    PolicyError::Checkpoint(m.into())
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, rows: usize, cols: usize, data: &[f64]) {
    debug_assert_eq!(rows * cols, data.len());
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let p = &state.policy.params;
    let norm = &state.policy.norm;
    let meta = toml::to_string(&Meta {
        step: state.step,
        model: p.config.clone(),
    })
    .expect("metadata serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    let count = 4 + 4 * p.layout.len();
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    put_tensor(&mut buf, "norm.action_mean", ACTION_DIM, 1, &norm.action.mean);
    put_tensor(&mut buf, "norm.action_std", ACTION_DIM, 1, &norm.action.std);
    let sd = norm.scene_mean.len();
    put_tensor(&mut buf, "norm.scene_mean", sd, 1, &norm.scene_mean);
    put_tensor(&mut buf, "norm.scene_std", sd, 1, &norm.scene_std);
    for (prefix, data) in [
        ("", &p.data),
        ("adam.m/", &state.adam.m),
        ("adam.v/", &state.adam.v),
        ("ema/", &state.ema),
    ] {
        for t in &p.layout {
            put_tensor(&mut buf, &format!("{prefix}{}", t.name), t.rows, t.cols, &data[t.range()]);
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PolicyError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| err("file is truncated"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize, PolicyError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn tensor(&mut self) -> Result<(String, usize, usize, Vec<f64>), PolicyError> {
        let n = self.u32()?;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| err("tensor name is not UTF-8"))?;
        let rows = self.u32()?;
        let cols = self.u32()?;
        let len = rows.checked_mul(cols).ok_or_else(|| err("tensor too large"))?;
        let bytes = self.take(len.checked_mul(8).ok_or_else(|| err("tensor too large"))?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, rows, cols, data))
    }
}

/// Decodes a checkpoint; when `expected` is given, its model configuration
/// must match the stored one.
pub fn decode_checkpoint(buf: &[u8], expected: Option<&ModelConfig>) -> Result<TrainState, PolicyError> {
    if buf.len() < CHECKPOINT_MAGIC.len() || &buf[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(err("not a checkpoint file (bad magic)"));
    }
    let mut r = Reader {
        buf,
        pos: CHECKPOINT_MAGIC.len(),
    };
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(err(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let n = r.u32()?;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| err("metadata is not UTF-8"))?;
    let meta: Meta = toml::from_str(text).map_err(|e| err(format!("metadata: {e}")))?;
    if let Some(cfg) = expected {
        if cfg != &meta.model {
            return Err(PolicyError::ShapeMismatch(format!(
                "checkpoint model {:?} does not match configured model {:?}",
                meta.model, cfg
            )));
        }
    }
    let mut params = PolicyParams::zeros(&meta.model)?;
    let mut adam = AdamState::new(params.len());
    let mut ema = vec![0.0; params.len()];
    let sd = meta.model.scene_dim;
    let mut norm = PolicyNorm::identity(sd);
    let count = r.u32()?;
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let (name, rows, cols, data) = r.tensor()?;
        let shape_err = |want: (usize, usize)| {
            PolicyError::ShapeMismatch(format!("tensor {name} is {rows}x{cols}, expected {}x{}", want.0, want.1))
        };
        let vec_into = |dst: &mut [f64]| -> Result<(), PolicyError> {
            if (rows, cols) != (dst.len(), 1) {
                return Err(shape_err((dst.len(), 1)));
            }
            dst.copy_from_slice(&data);
            Ok(())
        };
        match name.as_str() {
            "norm.action_mean" => vec_into(&mut norm.action.mean)?,
            "norm.action_std" => vec_into(&mut norm.action.std)?,
            "norm.scene_mean" => vec_into(&mut norm.scene_mean)?,
            "norm.scene_std" => vec_into(&mut norm.scene_std)?,
            _ => {
                let (dst, base) = if let Some(b) = name.strip_prefix("adam.m/") {
                    (&mut adam.m, b)
                } else if let Some(b) = name.strip_prefix("adam.v/") {
                    (&mut adam.v, b)
                } else if let Some(b) = name.strip_prefix("ema/") {
                    (&mut ema, b)
                } else {
                    (&mut params.data, name.as_str())
                };
                let spec = params
                    .layout
                    .iter()
                    .find(|t| t.name == base)
                    .ok_or_else(|| PolicyError::ShapeMismatch(format!("unknown tensor {name}")))?;
                if (rows, cols) != (spec.rows, spec.cols) {
                    return Err(shape_err((spec.rows, spec.cols)));
                }
                dst[spec.range()].copy_from_slice(&data);
            }
        }
        if !seen.insert(name.clone()) {
            return Err(err(format!("duplicate tensor {name}")));
        }
    }
    if seen.len() != 4 + 4 * params.layout.len() {
        return Err(err("checkpoint is missing tensors"));
    }
    if r.pos != buf.len() {
        return Err(err("trailing bytes after the last tensor"));
    }
    Ok(TrainState {
        policy: Policy { params, norm },
        adam,
        step: meta.step,
        ema,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<(), PolicyError> {
    std::fs::write(path, encode_checkpoint(state))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<TrainState, PolicyError> {
    decode_checkpoint(&std::fs::read(path)?, expected)
}
