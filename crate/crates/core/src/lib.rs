//! Human/robot action-space conversion and cross-embodiment action
//! prediction trained with conditional flow matching.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod geometry;
pub mod actionspace;
pub mod kinematics;
pub mod policy;
pub mod dataset;
pub mod retarget;
pub mod eval;
pub mod config;
pub mod pipeline;
pub mod selftest;

pub use actionspace::{ActionChunk, ActionMask, ActionVector, Side, UnifiedAction};
pub use config::ExperimentConfig;
pub use dataset::{Demonstration, Embodiment, TrainingSample};
pub use geometry::{Pose, Quaternion, Vec3};
pub use kinematics::{IkParams, JointVector, KinematicChain};
pub use policy::{ModelConfig, Policy, PolicyParams};
pub use retarget::RetargetConfig;
