//! Experiment configuration: one TOML document with a section per module,
//! plus `key=value` overrides addressed by dotted paths.

use crate::actionspace::{ArmJointState, RobotJointState};
use crate::dataset::ReachTaskConfig;
use crate::eval::EvalConfig;
use crate::geometry::{FrameTransform, Pose, Vec3};
use crate::kinematics::{IkParams, JointVector, KinematicChain};
use crate::policy::train::TrainConfig;
use crate::policy::ModelConfig;
use crate::retarget::{default_human_to_robot, RetargetConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable replacing the configured master seed.
pub const SEED_ENV: &str = "CROSSMIMIC_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config error at `{path}`: {message}")]
    Field { path: String, message: String },
    #[error("bad override `{0}`: expected key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory receiving datasets, checkpoints, metrics and reports.
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotConfig {
    /// Preset name (`arm_a`, `arm_b`) or path to a chain TOML file.
    pub left_chain: String,
    pub right_chain: String,
    pub left_base: [f64; 3],
    pub right_base: [f64; 3],
    /// Home joint angles, shared by both arms (rad).
    pub home: [f64; 6],
    pub home_gripper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetargetSection {
    /// Human→robot transform: row-major 3×3 linear part, then translation.
    pub human_to_robot: FrameTransform,
    pub ik: IkParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub robot_demos: usize,
    pub human_demos: usize,
    /// Chunk stride for training samples.
    pub stride: usize,
    /// Chunk stride for held-out samples.
    pub heldout_stride: usize,
    /// Demos whose id is a multiple of this are held out (0: none).
    pub heldout_every: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub robot: RobotConfig,
    pub retarget: RetargetSection,
    pub task: ReachTaskConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Directory relative paths resolve against; set by the loader.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Sub-seeds derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    Data = 1,
    Init = 2,
    Train = 3,
    Eval = 4,
    Sample = 5,
}

pub fn derive_seed(master: u64, stream: SeedStream) -> u64 {
    // splitmix64 finalizer over (master, stream)
    let mut z = master ^ (stream as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    /// Desk-scale defaults matching `configs/toy.toml`.
    pub fn toy() -> Self {
        let home = crate::retarget::default_home_joints().0;
        Self {
            seed: 0,
            paths: PathsConfig {
                out_dir: PathBuf::from("out"),
            },
            robot: RobotConfig {
                left_chain: "arm_a".into(),
                right_chain: "arm_a".into(),
                left_base: [0.0, 0.25, 0.0],
                right_base: [0.0, -0.25, 0.0],
                home,
                home_gripper: 1.0,
            },
            retarget: RetargetSection {
                human_to_robot: default_human_to_robot(),
                ik: IkParams::default(),
            },
            task: ReachTaskConfig::default(),
            data: DataConfig {
                robot_demos: 200,
                human_demos: 200,
                stride: 1,
                heldout_stride: 4,
                heldout_every: 10,
            },
            model: ModelConfig {
                cond_hidden: 256,
                hidden: vec![256, 256],
                ..ModelConfig::default()
            },
            train: TrainConfig {
                batch_size: 64,
                lr: 1e-3,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }

    /// Parses TOML text, applies overrides, then the seed environment
    /// variable, and resolves seeds. Relative paths resolve against
    /// `base_dir`.
    pub fn from_toml_str(text: &str, overrides: &[String], base_dir: &Path) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let de = toml::Value::Table(table);
        let mut cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Field {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("{SEED_ENV}={s} is not an unsigned integer")))?;
        }
        cfg.base_dir = base_dir.to_path_buf();
        cfg.resolve_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::from_toml_str(&text, overrides, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve_seeds(&mut self) {
        self.train.seed = derive_seed(self.seed, SeedStream::Train);
        self.eval.seed = derive_seed(self.seed, SeedStream::Eval);
    }

    pub fn seed_for(&self, stream: SeedStream) -> u64 {
        derive_seed(self.seed, stream)
    }

    pub fn horizon(&self) -> usize {
        self.model.horizon
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.paths.out_dir)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.task.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.model.scene_dim != 6 {
            return bad(format!("model.scene_dim must be 6 for reach tasks, got {}", self.model.scene_dim));
        }
        if self.model.vocab < crate::dataset::TASK_NAMES.len() {
            return bad(format!("model.vocab must cover the {} tasks", crate::dataset::TASK_NAMES.len()));
        }
        if self.data.stride == 0 || self.data.heldout_stride == 0 {
            return bad("data strides must be >= 1".into());
        }
        if self.eval.flow_steps == 0 {
            return bad("eval.flow_steps must be >= 1".into());
        }
        if !(self.eval.noise_scale >= 0.0 && self.eval.noise_scale.is_finite()) {
            return bad("eval.noise_scale must be finite and >= 0".into());
        }
        for c in [&self.robot.left_chain, &self.robot.right_chain] {
            if KinematicChain::preset(c).is_err() && !self.resolve(Path::new(c)).is_file() {
                return bad(format!("chain `{c}` is neither a preset nor a readable file"));
            }
        }
        Ok(())
    }

    fn chain(&self, spec: &str, base: [f64; 3]) -> Result<KinematicChain, ConfigError> {
        let chain = match KinematicChain::preset(spec) {
            Ok(c) => c,
            Err(_) => {
                let path = self.resolve(Path::new(spec));
                let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
                toml::from_str(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?
            }
        };
        Ok(chain.with_base(Pose::from_translation(Vec3::from(base))))
    }

    pub fn retarget_config(&self) -> Result<RetargetConfig, ConfigError> {
        let r = &self.robot;
        let arm = ArmJointState {
            q: JointVector(r.home),
            gripper: r.home_gripper,
        };
        let mut cfg = RetargetConfig::new(
            self.chain(&r.left_chain, r.left_base)?,
            self.chain(&r.right_chain, r.right_base)?,
            RobotJointState { left: arm, right: arm },
            self.retarget.human_to_robot,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.ik = self.retarget.ik;
        Ok(cfg)
    }
}

/// Sets `a.b.c = value` in `table`. The value is parsed as a TOML value,
/// falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(assignment.to_string()));
    }
    let value = parse_value(raw.trim());
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut node = table;
    for p in parts {
        node = node
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::Invalid(format!("override `{key}`: `{p}` is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_text() -> String {
        ExperimentConfig::toy().to_toml()
    }

    #[test]
    fn toy_round_trips_through_toml() {
        let cfg = ExperimentConfig::from_toml_str(&toy_text(), &[], Path::new(".")).unwrap();
        let mut want = ExperimentConfig::toy();
        want.resolve_seeds();
        assert_eq!(cfg, want);
        assert_eq!(cfg.retarget_config().unwrap(), RetargetConfig::default_bimanual());
    }

    #[test]
    fn shipped_toy_file_matches_builtin() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
        let cfg = ExperimentConfig::load(&path, &[]).unwrap();
        let mut want = ExperimentConfig::toy();
        want.resolve_seeds();
        want.base_dir = cfg.base_dir.clone();
        assert_eq!(cfg, want);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let o = vec!["train.steps=7".to_string(), "model.mode=\"regression\"".into(), "paths.out_dir=/tmp/x".into()];
        let cfg = ExperimentConfig::from_toml_str(&toy_text(), &o, Path::new(".")).unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.model.mode, crate::policy::DecoderMode::Regression);
        assert_eq!(cfg.out_dir(), PathBuf::from("/tmp/x"));
    }

    #[test]
    fn missing_field_names_its_path() {
        let text = toy_text().replace("horizon = 16\n", "");
        match ExperimentConfig::from_toml_str(&text, &[], Path::new(".")) {
            Err(ConfigError::Field { path, message }) => {
                assert_eq!(path, "model");
                assert!(message.contains("horizon"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let o = vec!["model.depth=3".to_string()];
        assert!(matches!(
            ExperimentConfig::from_toml_str(&toy_text(), &o, Path::new(".")),
            Err(ConfigError::Field { .. })
        ));
        assert!(matches!(
            ExperimentConfig::from_toml_str(&toy_text(), &["oops".into()], Path::new(".")),
            Err(ConfigError::Override(_))
        ));
    }

    #[test]
    fn derived_seeds_differ() {
        let s: Vec<u64> = [SeedStream::Data, SeedStream::Init, SeedStream::Train, SeedStream::Eval]
            .iter()
            .map(|&k| derive_seed(0, k))
            .collect();
        for i in 0..s.len() {
            for j in 0..i {
                assert_ne!(s[i], s[j]);
            }
        }
        assert_eq!(derive_seed(9, SeedStream::Data), derive_seed(9, SeedStream::Data));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let o = vec!["model.horizon=0".to_string()];
        assert!(matches!(
            ExperimentConfig::from_toml_str(&toy_text(), &o, Path::new(".")),
            Err(ConfigError::Invalid(_))
        ));
        let o = vec!["robot.left_chain=\"missing.toml\"".to_string()];
        assert!(ExperimentConfig::from_toml_str(&toy_text(), &o, Path::new(".")).is_err());
    }
}
