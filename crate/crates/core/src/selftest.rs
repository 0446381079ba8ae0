//! Fast internal consistency checks run by `crossmimic selftest`.

use crate::actionspace::{ArmJointState, EefState, RobotJointState, Side};
use crate::config::ExperimentConfig;
use crate::kinematics::{forward_kinematics, jacobian, solve_ik, JointVector, KinematicChain, NUM_JOINTS};
use crate::policy::checkpoint::{decode_checkpoint, encode_checkpoint};
use crate::policy::testing::{random_batch, random_config};
use crate::policy::train::TrainState;
use crate::policy::{grad_check, loss_value, GradFault, LossConfig, Policy, PolicyNorm, PolicyParams, DEFAULT_GRAD_EPS};
use crate::retarget::{human_to_robot_eef, robot_to_human, robot_eef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<16} {}", self.name, self.detail)
    }
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

pub fn random_in_limits(chain: &KinematicChain, rng: &mut impl Rng) -> JointVector {
    let lim = chain.limits();
    JointVector(std::array::from_fn(|i| rng.random_range(lim[i].0..lim[i].1)))
}

/// Max deviation of the analytic Jacobian from central differences of FK
/// (angular part through the relative rotation vector).
pub fn jacobian_fd_deviation(chain: &KinematicChain, q: &JointVector, h: f64) -> f64 {
    let j = jacobian(chain, q);
    let mut worst: f64 = 0.0;
    for k in 0..NUM_JOINTS {
        let mut qp = *q;
        let mut qm = *q;
        qp.0[k] += h;
        qm.0[k] -= h;
        let (fp, fm) = (forward_kinematics(chain, &qp), forward_kinematics(chain, &qm));
        let lin = (fp.position - fm.position) / (2.0 * h);
        let ang = fp.orientation.mul(&fm.orientation.inverse()).to_rotation_vector() / (2.0 * h);
        for r in 0..3 {
            worst = worst.max((j[(r, k)] - lin[r]).abs()).max((j[(r + 3, k)] - ang[r]).abs());
        }
    }
    worst
}

fn jacobian_check(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> CheckResult {
    let rc = match cfg.retarget_config() {
        Ok(r) => r,
        Err(e) => return check("jacobian", false, e.to_string()),
    };
    let mut worst: f64 = 0.0;
    for side in Side::BOTH {
        for _ in 0..25 {
            let q = random_in_limits(rc.chain(side), rng);
            worst = worst.max(jacobian_fd_deviation(rc.chain(side), &q, 1e-6));
        }
    }
    check("jacobian", worst < 1e-5, format!("max deviation {worst:.2e} over 50 configurations"))
}

fn ik_check(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> CheckResult {
    let rc = match cfg.retarget_config() {
        Ok(r) => r,
        Err(e) => return check("ik", false, e.to_string()),
    };
    let (mut ok, mut n) = (0, 0);
    for side in Side::BOTH {
        let chain = rc.chain(side);
        for _ in 0..100 {
            let target = forward_kinematics(chain, &random_in_limits(chain, rng));
            n += 1;
            if solve_ik(chain, &target, &chain.mid_configuration(), &rc.ik).is_ok_and(|s| s.converged) {
                ok += 1;
            }
        }
    }
    let rate = ok as f64 / n as f64;
    check("ik", rate >= 0.99, format!("{ok}/{n} reachable targets converged"))
}

fn gradient_check(cfg: &ExperimentConfig, fault: Option<&GradFault>) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut configs = vec![cfg.model.clone()];
    configs.extend((0..9).map(|_| random_config(&mut rng)));
    let mut worst = (0.0, String::new());
    for (k, mc) in configs.iter().enumerate() {
        let run = || -> Result<_, crate::policy::PolicyError> {
            let params = PolicyParams::init(mc, k as u64)?;
            let batch = random_batch(mc, 4, 100 + k as u64);
            let f = fault.filter(|f| params.spec(&f.tensor).is_some());
            grad_check(&params, &batch, &LossConfig::default(), DEFAULT_GRAD_EPS, 200, k as u64, f)
        };
        match run() {
            Ok(r) if r.max_rel_error >= worst.0 => worst = (r.max_rel_error, r.worst_tensor),
            Ok(_) => {}
            Err(e) => return check("gradient", false, e.to_string()),
        }
    }
    check(
        "gradient",
        worst.0 < 1e-4,
        format!("max relative error {:.2e} (tensor {}) over {} models", worst.0, worst.1, configs.len()),
    )
}

fn loss_identity_check(cfg: &ExperimentConfig) -> CheckResult {
    let mut bad = 0;
    for k in 0..20u64 {
        let params = match PolicyParams::init(&cfg.model, k) {
            Ok(p) => p,
            Err(e) => return check("loss-identity", false, e.to_string()),
        };
        let b = random_batch(&cfg.model, 4, k);
        match loss_value(&params, &b, &LossConfig::default()) {
            Ok(l) if l.total.to_bits() == (l.l_r2h + l.l_h2r).to_bits() => {}
            _ => bad += 1,
        }
    }
    check("loss-identity", bad == 0, format!("{bad}/20 batches violate total = l_r2h + l_h2r"))
}

fn retarget_check(cfg: &ExperimentConfig) -> CheckResult {
    let rc = match cfg.retarget_config() {
        Ok(r) => r,
        Err(e) => return check("retarget", false, e.to_string()),
    };
    let mut worst: f64 = 0.0;
    for k in 0..5 {
        let path: Vec<RobotJointState> = (0..20)
            .map(|t| {
                let s = t as f64 / 19.0;
                let arm = |sign: f64| ArmJointState {
                    q: JointVector(std::array::from_fn(|i| {
                        rc.home.left.q.0[i] + sign * 0.2 * s * ((i + k) as f64 * 0.7).sin()
                    })),
                    gripper: 0.5 + 0.5 * (s * 3.0).cos(),
                };
                RobotJointState { left: arm(1.0), right: arm(-1.0) }
            })
            .collect();
        let eef: Vec<EefState> = path.iter().map(|j| robot_eef(j, &rc)).collect();
        let grips: Vec<[f64; 2]> = path.iter().map(|j| [j.left.gripper, j.right.gripper]).collect();
        let mut c = rc.clone();
        c.initial_eef = eef[0];
        let back = robot_to_human(&eef, &grips, &c).and_then(|h| human_to_robot_eef(&h, &c));
        match back {
            Ok(b) => {
                for (x, y) in eef.iter().zip(&b) {
                    for side in Side::BOTH {
                        worst = worst.max((x.pose(side).position - y.pose(side).position).norm());
                    }
                }
            }
            Err(e) => return check("retarget", false, e.to_string()),
        }
    }
    check("retarget", worst < 1e-6, format!("round-trip position error {worst:.2e} m"))
}

fn checkpoint_check(cfg: &ExperimentConfig) -> CheckResult {
    let params = match PolicyParams::init(&cfg.model, 1) {
        Ok(p) => p,
        Err(e) => return check("checkpoint", false, e.to_string()),
    };
    let mut st = TrainState::new(Policy {
        params,
        norm: PolicyNorm::identity(cfg.model.scene_dim),
    });
    st.step = 3;
    st.adam.m[0] = 0.1;
    let bytes = encode_checkpoint(&st);
    let ok = decode_checkpoint(&bytes, Some(&cfg.model)).is_ok_and(|b| b == st);
    check("checkpoint", ok, format!("{} bytes round trip", bytes.len()))
}

/// Runs every check; `fault` corrupts one tensor's analytic gradient.
pub fn run_selftest(cfg: &ExperimentConfig, fault: Option<&GradFault>) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    vec![
        jacobian_check(cfg, &mut rng),
        ik_check(cfg, &mut rng),
        gradient_check(cfg, fault),
        loss_identity_check(cfg),
        retarget_check(cfg),
        checkpoint_check(cfg),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_passes_and_fault_is_named() {
        let mut cfg = ExperimentConfig::toy();
        cfg.model.hidden = vec![16, 16];
        cfg.model.cond_dim = 8;
        cfg.model.cond_hidden = 8;
        cfg.model.horizon = 4;
        let results = run_selftest(&cfg, None);
        for r in &results {
            assert!(r.passed, "{r}");
        }
        let fault = GradFault {
            tensor: "row.w1".into(),
            scale: 2.0,
        };
        let g = gradient_check(&cfg, Some(&fault));
        assert!(!g.passed);
        assert!(g.detail.contains("row.w1"), "{}", g.detail);
    }
}
