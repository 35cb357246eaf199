//! Fast self-check: condensing equivalence on random instances, leg
//! Jacobians against finite differences, and a standing equilibrium solve.
//! Fault hooks corrupt one ingredient so the check can be seen to fail.

use std::fmt;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::RobotState;
use crate::error::Result;
use crate::kinematics::{
    finite_difference_jacobian, leg_jacobian, BodyPose, JointLimits, LegJoints,
};
use crate::model::{GaitSchedule, Leg, PayloadSpec, RobotModel};
use crate::mpc::{
    build_condensed_with, build_problem, build_reference, level_frames, predict_foot_positions,
    solve_mpc, solve_problem, standing_inputs, Command, Formulation, MpcConfig, MpcInputs,
};

/// Relative tolerance on first-step inputs between the two formulations.
pub const CONDENSING_TOLERANCE: f64 = 1e-4;
/// Largest allowed entry of `J - J_fd`.
pub const JACOBIAN_TOLERANCE: f64 = 1e-5;
/// Relative tolerance on the supported weight in the equilibrium solve.
pub const EQUILIBRIUM_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Negate the condensed input map `B_qp`.
    FlipInputMap,
    /// Set the friction coefficient to zero.
    ZeroFriction,
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub condensing_instances: usize,
    pub jacobian_configs: usize,
    pub seed: u64,
    pub fault: Fault,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            condensing_instances: 10,
            jacobian_configs: 200,
            seed: 0,
            fault: Fault::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckItem {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "ok  " } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckReport {
    pub items: Vec<CheckItem>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    pub fn first_failure(&self) -> Option<&CheckItem> {
        self.items.iter().find(|i| !i.passed)
    }
}

/// Random state and contact plan near the nominal walking pose. Feet sit
/// near the hips, so a vertical support force is always admissible.
pub fn random_instance(rng: &mut impl Rng, model: &RobotModel, cfg: &MpcConfig) -> MpcInputs {
    let mut state = RobotState::at_height(model.nominal_height + rng.random_range(-0.04..0.04));
    state.position.x = rng.random_range(-0.5..0.5);
    state.position.y = rng.random_range(-0.5..0.5);
    state.euler = Vector3::new(
        rng.random_range(-0.15..0.15),
        rng.random_range(-0.15..0.15),
        rng.random_range(-3.0..3.0),
    );
    state.velocity = Vector3::new(
        rng.random_range(-0.8..0.8),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.2..0.2),
    );
    state.angular_velocity = Vector3::new(
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-1.5..1.5),
    );
    let cmd = Command::new(
        rng.random_range(-0.6..0.6),
        rng.random_range(-0.2..0.2),
        rng.random_range(-1.0..1.0),
    );
    let gait = if rng.random_bool(0.3) {
        GaitSchedule::standing()
    } else {
        GaitSchedule::walking(rng.random_range(0.4..0.6))
    };
    let payload = if rng.random_bool(0.5) {
        PayloadSpec::constant(rng.random_range(0.5..4.0), [0.05, 0.0, 0.05])
    } else {
        PayloadSpec::none()
    };
    let t0 = rng.random_range(0.0..1.0);
    let plan = gait
        .contact_horizon(&payload, t0, cfg.dt, cfg.horizon)
        .expect("generated gait is valid");
    let rotation = crate::dynamics::yaw_rotation(state.euler.z);
    let feet = Leg::BOTH.map(|leg| {
        let mut hip = state.position + rotation * model.hip_in_body(leg);
        hip.x += rng.random_range(-0.05..0.05);
        hip.y += rng.random_range(-0.03..0.03);
        hip.z = 0.0;
        hip
    });
    let measured = level_frames(&feet, state.euler.z);
    let reference = build_reference(&cmd, &state, cfg, model.nominal_height);
    let velocities = vec![state.velocity; cfg.horizon];
    let feet = predict_foot_positions(
        model,
        &state,
        &gait,
        &plan,
        &cmd,
        &reference,
        &measured,
        &velocities,
        0.0,
    );
    MpcInputs {
        state,
        reference,
        plan,
        feet,
        payload_offset: payload.offset_body(),
    }
}

/// First-step input difference between the two formulations, scaled as
/// `‖Δu‖∞ / (1 + ‖u‖∞)`.
pub fn condensing_gap(
    inputs: &MpcInputs,
    model: &RobotModel,
    cfg: &MpcConfig,
    fault: Fault,
) -> Result<f64> {
    let (_, models, ineq) = build_problem(inputs, model, cfg, Formulation::Noncondensed)?;
    let sparse = solve_mpc(inputs, model, cfg, Formulation::Noncondensed)?;
    let reference = crate::mpc::effective_reference(inputs, model, cfg);
    let qp = build_condensed_with(
        &inputs.state.augmented(),
        &reference,
        &models,
        &ineq,
        cfg,
        fault == Fault::FlipInputMap,
    )?;
    let dense = solve_problem(inputs, model, cfg, &qp, &models, &ineq)?;
    Ok((dense.u.0 - sparse.u.0).amax() / (1.0 + dense.u.0.amax()))
}

fn check_condensing(opts: &CheckOptions, model: &RobotModel) -> CheckItem {
    let cfg = MpcConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    for i in 0..opts.condensing_instances {
        let inputs = random_instance(&mut rng, model, &cfg);
        match condensing_gap(&inputs, model, &cfg, opts.fault) {
            Ok(gap) if gap <= CONDENSING_TOLERANCE => worst = worst.max(gap),
            Ok(gap) => {
                return CheckItem {
                    name: "condensing equivalence",
                    passed: false,
                    detail: format!(
                        "instance {i}: scaled first-step difference {gap:.3e} exceeds {CONDENSING_TOLERANCE:.0e}"
                    ),
                }
            }
            Err(e) => {
                return CheckItem {
                    name: "condensing equivalence",
                    passed: false,
                    detail: format!("instance {i}: {e}"),
                }
            }
        }
    }
    CheckItem {
        name: "condensing equivalence",
        passed: true,
        detail: format!(
            "{} instances, worst scaled difference {worst:.3e}",
            opts.condensing_instances
        ),
    }
}

/// Random joint configuration inside the joint limits.
pub fn random_joints(rng: &mut impl Rng, leg: Leg, limits: &JointLimits) -> LegJoints {
    let mut q = [0.0; 5];
    for (i, qi) in q.iter_mut().enumerate() {
        *qi = rng.random_range(limits.lower[i]..limits.upper[i]);
    }
    LegJoints { leg, q }
}

fn check_jacobian(opts: &CheckOptions, model: &RobotModel) -> CheckItem {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let limits = JointLimits::default();
    let mut worst = 0.0f64;
    for i in 0..opts.jacobian_configs {
        let leg = if i % 2 == 0 { Leg::Left } else { Leg::Right };
        let joints = random_joints(&mut rng, leg, &limits);
        let euler = Vector3::new(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-3.0..3.0),
        );
        let body = BodyPose::from_euler(Vector3::new(0.1, -0.2, 0.5), &euler);
        let j = leg_jacobian(model, &joints, &body);
        let fd = finite_difference_jacobian(model, &joints, &body, 1e-6);
        worst = worst.max((j - fd).amax());
    }
    CheckItem {
        name: "leg Jacobian",
        passed: worst <= JACOBIAN_TOLERANCE,
        detail: format!(
            "{} configurations, largest deviation from finite differences {worst:.3e}",
            opts.jacobian_configs
        ),
    }
}

fn check_equilibrium(model: &RobotModel) -> CheckItem {
    let cfg = MpcConfig::default();
    let inputs = standing_inputs(model, &cfg, 0.0, Vector3::zeros());
    let weight = model.mass * model.gravity;
    match solve_mpc(&inputs, model, &cfg, Formulation::Condensed) {
        Ok(sol) => {
            let fz = sol.u.force(Leg::Left).z + sol.u.force(Leg::Right).z;
            let err = (fz - weight).abs() / weight;
            CheckItem {
                name: "equilibrium solve",
                passed: err <= EQUILIBRIUM_TOLERANCE,
                detail: format!("total normal force {fz:.3} N for weight {weight:.3} N"),
            }
        }
        Err(e) => CheckItem {
            name: "equilibrium solve",
            passed: false,
            detail: e.to_string(),
        },
    }
}

pub fn run_checks(opts: &CheckOptions) -> CheckReport {
    let mut model = RobotModel::default();
    if opts.fault == Fault::ZeroFriction {
        model.friction = 0.0;
    }
    CheckReport {
        items: vec![
            check_condensing(opts, &model),
            check_jacobian(opts, &model),
            check_equilibrium(&model),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(fault: Fault) -> CheckOptions {
        CheckOptions {
            condensing_instances: 3,
            jacobian_configs: 20,
            seed: 5,
            fault,
        }
    }

    #[test]
    fn clean_build_passes() {
        let report = run_checks(&quick(Fault::None));
        assert!(report.passed(), "{:?}", report.first_failure());
    }

    #[test]
    fn flipped_input_map_is_caught() {
        let report = run_checks(&quick(Fault::FlipInputMap));
        let fail = report.first_failure().unwrap();
        assert_eq!(fail.name, "condensing equivalence");
    }

    #[test]
    fn zero_friction_names_the_constraint() {
        let report = run_checks(&quick(Fault::ZeroFriction));
        let fail = report
            .items
            .iter()
            .find(|i| i.name == "equilibrium solve")
            .unwrap();
        assert!(!fail.passed);
        assert!(fail.detail.contains("friction"), "{}", fail.detail);
    }

    #[test]
    fn random_instances_are_reproducible() {
        let model = RobotModel::default();
        let cfg = MpcConfig::default();
        let a = random_instance(&mut ChaCha8Rng::seed_from_u64(1), &model, &cfg);
        let b = random_instance(&mut ChaCha8Rng::seed_from_u64(1), &model, &cfg);
        assert_eq!(a.state, b.state);
        assert_eq!(a.plan, b.plan);
    }
}
