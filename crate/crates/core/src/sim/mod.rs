//! Closed-loop simulation: nonlinear rigid body physics at 1 kHz with the
//! MPC re-solved at its own rate and the latest input held in between.
//!
//! Stance feet are pinned where they touch the true terrain. The controller
//! never reads the terrain; it only sees measured contact points.

pub mod metrics;
pub mod scenario;
pub mod terrain;

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix5, Matrix6, Vector3, Vector5, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dynamics::{
    euler_rate_map_inv, nonlinear_derivative, AugmentedState, ControlInput, PayloadLoad,
    RobotState, StateDerivative, SINGULARITY_EPS,
};
use crate::error::{Error, Result};
use crate::kinematics::{
    clamp_torques, inverse_kinematics_best, leg_jacobian, level_foot_rotation, swing_force,
    swing_profile, torque_map, BodyPose, FootPose, JointLimits, LegJacobian, LegJoints, LegWrench,
    SwingGains, SwingState,
};
use crate::model::{Leg, RobotModel};
use crate::mpc::{
    build_reference_from, input_violation, leg_rows, planned_velocities, predict_foot_positions,
    solve_mpc, touchdown_target, Command, FootFrame, LegRow, MpcInputs, ReferenceAnchor,
};
use crate::qp::{solve_qp, SolverSettings};

pub use metrics::{compute_metrics, MetricInputs, Metrics};
pub use scenario::{CommandPoint, Disturbance, Scenario, SimConfig};
pub use terrain::{Terrain, TerrainConfig, TerrainKind};

/// Attitude beyond which the run counts as a fall (rad).
pub const FALL_TILT: f64 = 0.5;
/// CoM height above the terrain below which the run counts as a fall (m).
pub const FALL_HEIGHT: f64 = 0.3;
/// How far the planar reference may lead the measured CoM (m, rad).
pub const REFERENCE_LEAD: f64 = 0.1;
/// Mass of the swing foot point model (kg).
pub const SWING_FOOT_MASS: f64 = 0.5;

/// Semi-implicit Euler: rates first, then pose from the updated rates.
pub fn integrate_step(
    state: &RobotState,
    derivative: &StateDerivative,
    dt: f64,
) -> Result<RobotState> {
    let mut next = *state;
    next.velocity += derivative.fixed_rows::<3>(6) * dt;
    next.angular_velocity += derivative.fixed_rows::<3>(9) * dt;
    next.position += next.velocity * dt;
    next.euler += euler_rate_map_inv(&state.euler, SINGULARITY_EPS)? * next.angular_velocity * dt;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AppliedWrench {
    /// Ground reaction wrench actually applied to the body.
    pub grf: LegWrench,
    pub torques: [f64; 5],
    pub saturated: [bool; 5],
}

/// Maps a commanded ground reaction wrench through the leg to joint torques,
/// saturates them, and returns the wrench the saturated torques can still
/// deliver: the least-norm correction of the commanded wrench whose torque
/// image equals the clamped torques.
///
/// Five torques leave one wrench direction free. When the least-norm wrench
/// breaks one of `rows`, it is moved along that direction to the nearest
/// point satisfying them all. If no such point exists, the result is the
/// wrench closest to the command that satisfies `rows` with every torque
/// inside its limit.
pub fn effective_wrench(
    model: &RobotModel,
    joints: &LegJoints,
    body: &BodyPose,
    foot_rotation: &Matrix3<f64>,
    grf: &LegWrench,
    stance: bool,
    rows: &[LegRow],
) -> Result<AppliedWrench> {
    if !stance {
        return Err(Error::Contract("stance wrench requested for a swing leg"));
    }
    // The leg pushes on the ground with the opposite of the reaction.
    let leg = LegWrench {
        force: -grf.force,
        moment: -grf.moment,
    };
    let tau = torque_map(model, joints, body, foot_rotation, &leg);
    let (clamped, saturated) = clamp_torques(&tau, &model.torque_limits);
    if !saturated.iter().any(|s| *s) {
        return Ok(AppliedWrench {
            grf: *grf,
            torques: tau,
            saturated,
        });
    }
    let j = leg_jacobian(model, joints, body);
    let gram_inv: Matrix5<f64> = (j.transpose() * j)
        .try_inverse()
        .ok_or(Error::Contract("leg Jacobian is rank deficient"))?;
    let delta = Vector5::from_iterator((0..5).map(|i| clamped[i] - tau[i]));
    let reaction = -(leg.to_vector() + j * gram_inv * delta);
    let free = torque_free_direction(&j, &gram_inv);
    if let Some(alpha) = nearest_admissible(rows, &reaction, &free) {
        return Ok(AppliedWrench {
            grf: LegWrench::from_vector(&(reaction + free * alpha)),
            torques: clamped,
            saturated,
        });
    }
    let w = closest_within_limits(rows, &grf.to_vector(), &j, &model.torque_limits)?;
    let t = j.transpose() * -w;
    Ok(AppliedWrench {
        grf: LegWrench::from_vector(&w),
        torques: [t[0], t[1], t[2], t[3], t[4]],
        saturated,
    })
}

/// Unit wrench with zero torque image, `Jᵀ n = 0`.
fn torque_free_direction(j: &LegJacobian, gram_inv: &Matrix5<f64>) -> Vector6<f64> {
    let proj = Matrix6::identity() - j * gram_inv * j.transpose();
    let k = (0..6)
        .max_by(|&a, &b| proj[(a, a)].total_cmp(&proj[(b, b)]))
        .unwrap_or(0);
    let n = proj.column(k).into_owned();
    n / n.norm()
}

/// Step `alpha` along `dir` closest to zero that satisfies every row.
fn nearest_admissible(rows: &[LegRow], w: &Vector6<f64>, dir: &Vector6<f64>) -> Option<f64> {
    let tol = 1e-9 * (1.0 + w.amax());
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for r in rows {
        let c = Vector6::from_row_slice(&r.coeffs);
        let (slope, excess) = (c.dot(dir), c.dot(w) - r.bound);
        if slope.abs() <= 1e-12 {
            if excess > tol {
                return None;
            }
        } else if slope > 0.0 {
            hi = hi.min(-excess / slope);
        } else {
            lo = lo.max(-excess / slope);
        }
    }
    (lo <= hi).then(|| 0.0f64.clamp(lo, hi))
}

/// Reaction wrench nearest `target` satisfying `rows` and `|Jᵀ w| <= limits`.
fn closest_within_limits(
    rows: &[LegRow],
    target: &Vector6<f64>,
    j: &LegJacobian,
    limits: &[f64; 5],
) -> Result<Vector6<f64>> {
    let m = rows.len() + 10;
    let mut c = DMatrix::zeros(m, 6);
    let mut d = DVector::zeros(m);
    for (i, r) in rows.iter().enumerate() {
        for k in 0..6 {
            c[(i, k)] = r.coeffs[k];
        }
        d[i] = r.bound;
    }
    let jt = j.transpose();
    for i in 0..5 {
        for k in 0..6 {
            c[(rows.len() + 2 * i, k)] = jt[(i, k)];
            c[(rows.len() + 2 * i + 1, k)] = -jt[(i, k)];
        }
        d[rows.len() + 2 * i] = limits[i];
        d[rows.len() + 2 * i + 1] = limits[i];
    }
    let h = DMatrix::identity(6, 6);
    let f = DVector::from_iterator(6, target.iter().map(|v| -v));
    let none = DMatrix::zeros(0, 6);
    let sol = solve_qp(
        &h,
        &f,
        &none,
        &DVector::zeros(0),
        &c,
        &d,
        &SolverSettings::default(),
    )?;
    Ok(Vector6::from_iterator(sol.x.iter().copied()))
}

/// One logged physics tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub t: f64,
    pub state: RobotState,
    /// Applied ground reaction wrenches, after any torque saturation.
    pub u: ControlInput,
    /// Joint torques, left leg then right leg.
    pub torques: [f64; 10],
    pub saturated: [bool; 10],
    pub contact: [bool; 2],
    /// Yaw of each foot's level contact frame (rad).
    pub foot_yaw: [f64; 2],
    /// Wall time of the MPC solve issued at this tick.
    pub solve_ms: Option<f64>,
    /// Contact-constraint violation of the applied wrenches.
    pub violation: f64,
    pub command: Command,
    /// Reference CoM position.
    pub reference: Vector3<f64>,
    pub payload_mass: f64,
}

impl TickRecord {
    pub fn com_error(&self) -> f64 {
        (self.state.position - self.reference).norm()
    }
}

#[derive(Debug, Clone)]
pub struct SimLog {
    pub records: Vec<TickRecord>,
    pub solve_ms: Vec<f64>,
    pub solver_failures: usize,
    /// First solver error message, if any.
    pub first_failure: Option<String>,
    pub fall_time: Option<f64>,
    pub metrics: Metrics,
}

#[derive(Debug, Clone)]
struct LegSim {
    stance: bool,
    /// Pinned contact point while in stance.
    contact: Vector3<f64>,
    foot_yaw: f64,
    foot_pos: Vector3<f64>,
    foot_vel: Vector3<f64>,
    liftoff: Vector3<f64>,
    joints: LegJoints,
}

struct Simulator<'a> {
    s: &'a Scenario,
    terrain: Terrain,
    state: RobotState,
    legs: [LegSim; 2],
    anchor: ReferenceAnchor,
    /// Latest MPC output, held between solves.
    u_cmd: ControlInput,
    /// Time and predicted states of the latest successful solve.
    last_plan: Option<(f64, Vec<AugmentedState>)>,
    ground: f64,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    limits: JointLimits,
    gains: SwingGains,
}

impl<'a> Simulator<'a> {
    fn new(s: &'a Scenario) -> Result<Self> {
        let terrain = s.terrain.build()?;
        let model = &s.robot;
        let ground = terrain.height(0.0, 0.0);
        let state = RobotState::at_height(ground + model.nominal_height);
        let body = BodyPose::from_euler(state.position, &state.euler);
        let limits = JointLimits::default();
        let legs = Leg::BOTH.map(|leg| {
            let hip = model.hip_in_body(leg);
            let p = Vector3::new(hip.x, hip.y, terrain.height(hip.x, hip.y));
            let target = FootPose {
                position: p,
                rotation: Matrix3::identity(),
            };
            let (joints, _) =
                inverse_kinematics_best(model, &target, &body, &LegJoints::crouched(leg), &limits);
            LegSim {
                stance: true,
                contact: p,
                foot_yaw: 0.0,
                foot_pos: p,
                foot_vel: Vector3::zeros(),
                liftoff: p,
                joints,
            }
        });
        let noise = if s.sim.noise > 0.0 {
            Some(Normal::new(0.0, s.sim.noise).map_err(|e| Error::InvalidConfig(e.to_string()))?)
        } else {
            None
        };
        Ok(Self {
            s,
            anchor: ReferenceAnchor::from_state(&state),
            terrain,
            state,
            legs,
            u_cmd: ControlInput::default(),
            last_plan: None,
            ground,
            rng: ChaCha8Rng::seed_from_u64(s.sim.seed),
            noise,
            limits,
            gains: SwingGains {
                kp: s.gait.swing_kp,
                kd: s.gait.swing_kd,
            },
        })
    }

    fn measured(&mut self) -> RobotState {
        let Some(noise) = self.noise else {
            return self.state;
        };
        let mut x = self.state.to_vector();
        for v in x.iter_mut() {
            *v += noise.sample(&mut self.rng);
        }
        RobotState::from_vector(&x)
    }

    fn frames(&self) -> [FootFrame; 2] {
        Leg::BOTH.map(|leg| {
            let l = &self.legs[leg.index()];
            if l.stance {
                FootFrame {
                    position: l.contact,
                    rotation: level_foot_rotation(l.foot_yaw),
                }
            } else {
                FootFrame {
                    position: l.foot_pos,
                    rotation: level_foot_rotation(self.state.euler.z),
                }
            }
        })
    }

    fn reference_height(&self) -> f64 {
        self.s.robot.nominal_height + self.ground
    }

    fn solve(&mut self, t: f64, cmd: &Command, measured: &RobotState) -> Result<f64> {
        let s = self.s;
        let stance: Vec<f64> = self
            .legs
            .iter()
            .filter(|l| l.stance)
            .map(|l| l.contact.z)
            .collect();
        if !stance.is_empty() {
            self.ground = stance.iter().sum::<f64>() / stance.len() as f64;
        }
        let reference = build_reference_from(cmd, &self.anchor, &s.mpc, self.reference_height());
        let plan = s
            .gait
            .contact_horizon(&s.payload, t, s.mpc.dt, s.mpc.horizon)?;
        let frames = self.frames();
        let velocities = match &self.last_plan {
            Some((t_plan, states)) => planned_velocities(
                states,
                t - t_plan,
                s.mpc.dt,
                s.mpc.horizon,
                &measured.velocity,
            ),
            None => vec![measured.velocity; s.mpc.horizon],
        };
        let feet = predict_foot_positions(
            &s.robot,
            measured,
            &s.gait,
            &plan,
            cmd,
            &reference,
            &frames,
            &velocities,
            self.ground,
        );
        let inputs = MpcInputs {
            state: *measured,
            reference,
            plan,
            feet,
            payload_offset: s.payload.offset_body(),
        };
        let start = Instant::now();
        let sol = solve_mpc(&inputs, &s.robot, &s.mpc, s.mpc.formulation)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        self.u_cmd = sol.u;
        self.last_plan = Some((t, sol.states));
        Ok(ms)
    }

    fn run(mut self) -> Result<SimLog> {
        let s = self.s;
        let model = &s.robot;
        let dt = s.sim.dt;
        let n = s.ticks();
        let solve_every = ((1.0 / (s.mpc.frequency * dt)).round() as usize).max(1);
        let mut records = Vec::with_capacity(n + 1);
        let mut solve_times = Vec::new();
        let mut failures = 0;
        let mut first_failure = None;
        let mut fall_time = None;
        let mut last = None;

        for i in 0..n {
            let t = i as f64 * dt;
            let cs = s.gait.contact_state(t)?;
            let mut changed = false;
            for leg in Leg::BOTH {
                let l = &mut self.legs[leg.index()];
                let now = cs.stance[leg.index()];
                if l.stance && !now {
                    l.liftoff = l.contact;
                    l.foot_pos = l.contact;
                    l.foot_vel = Vector3::zeros();
                    changed = true;
                } else if !l.stance && now {
                    let z = self.terrain.height(l.foot_pos.x, l.foot_pos.y);
                    l.contact = Vector3::new(l.foot_pos.x, l.foot_pos.y, z);
                    l.foot_pos = l.contact;
                    l.foot_vel = Vector3::zeros();
                    l.foot_yaw = self.state.euler.z;
                    changed = true;
                }
                l.stance = now;
            }

            let cmd = s.command_at(t);
            let measured = self.measured();
            let mut solve_ms = None;
            if i % solve_every == 0 || changed {
                match self.solve(t, &cmd, &measured) {
                    Ok(ms) => {
                        solve_ms = Some(ms);
                        solve_times.push(ms);
                    }
                    Err(e) => {
                        failures += 1;
                        first_failure.get_or_insert_with(|| format!("t = {t:.3} s: {e}"));
                    }
                }
            }
            for leg in Leg::BOTH {
                if !cs.stance[leg.index()] {
                    self.u_cmd.zero_leg(leg);
                }
            }

            // Low-level layer: torques for every leg, swing foot motion.
            let body = BodyPose::from_euler(self.state.position, &self.state.euler);
            let mut applied = ControlInput::default();
            let mut torques = [0.0; 10];
            let mut saturated = [false; 10];
            for leg in Leg::BOTH {
                let k = leg.index();
                let swing_duration = s.gait.swing_duration(leg);
                let target_pose;
                let tau;
                let sat;
                if cs.stance[k] {
                    let l = &self.legs[k];
                    target_pose = FootPose {
                        position: l.contact,
                        rotation: level_foot_rotation(l.foot_yaw),
                    };
                    let (q, _) = inverse_kinematics_best(
                        model,
                        &target_pose,
                        &body,
                        &l.joints,
                        &self.limits,
                    );
                    let grf = LegWrench {
                        force: self.u_cmd.force(leg),
                        moment: self.u_cmd.moment(leg),
                    };
                    let rows = leg_rows(
                        model,
                        &FootFrame {
                            position: l.contact,
                            rotation: target_pose.rotation,
                        },
                        true,
                    );
                    let w = effective_wrench(
                        model,
                        &q,
                        &body,
                        &target_pose.rotation,
                        &grf,
                        true,
                        &rows,
                    )?;
                    applied.set_force(leg, &w.grf.force);
                    applied.set_moment(leg, &w.grf.moment);
                    tau = w.torques;
                    sat = w.saturated;
                    self.legs[k].joints = q;
                } else {
                    let remaining = (1.0 - cs.phase[k]) * swing_duration;
                    let yaw_td = self.anchor.yaw + cmd.yaw_rate * remaining;
                    let v_cmd = cmd.world_velocity(yaw_td);
                    let com_td = Vector3::new(
                        self.anchor.position.x + v_cmd.x * remaining,
                        self.anchor.position.y + v_cmd.y * remaining,
                        self.reference_height(),
                    );
                    let target = touchdown_target(
                        model,
                        &s.gait,
                        leg,
                        &com_td,
                        yaw_td,
                        &measured.velocity,
                        &v_cmd,
                        self.ground,
                    );
                    let l = &mut self.legs[k];
                    let swing = SwingState {
                        liftoff: l.liftoff,
                        target,
                        phase: cs.phase[k],
                        duration: swing_duration,
                        apex: s.gait.swing_apex,
                    };
                    let (pd, vd) = swing_profile(&swing);
                    let f =
                        swing_force((&pd, &vd), (&l.foot_pos, &l.foot_vel), &self.gains, false)?;
                    l.foot_vel += f * (dt / SWING_FOOT_MASS);
                    l.foot_pos += l.foot_vel * dt;
                    target_pose = FootPose {
                        position: l.foot_pos,
                        rotation: level_foot_rotation(self.state.euler.z),
                    };
                    let (q, _) = inverse_kinematics_best(
                        model,
                        &target_pose,
                        &body,
                        &l.joints,
                        &self.limits,
                    );
                    l.joints = q;
                    let raw = torque_map(
                        model,
                        &q,
                        &body,
                        &target_pose.rotation,
                        &LegWrench::force_only(f),
                    );
                    (tau, sat) = clamp_torques(&raw, &model.torque_limits);
                }
                torques[5 * k..5 * k + 5].copy_from_slice(&tau);
                saturated[5 * k..5 * k + 5].copy_from_slice(&sat);
            }

            let frames = self.frames();
            let violation = input_violation(model, &frames, cs.stance, &applied);
            let payload = PayloadLoad {
                mass: s.payload.mass_at(t),
                offset_world: self.state.rotation() * s.payload.offset_body(),
                contact: s.payload.in_contact(t),
            };
            let reference = Vector3::new(
                self.anchor.position.x,
                self.anchor.position.y,
                self.reference_height(),
            );
            let record = TickRecord {
                t,
                state: self.state,
                u: applied,
                torques,
                saturated,
                contact: cs.stance,
                foot_yaw: frames.map(|f| f.rotation[(1, 0)].atan2(f.rotation[(0, 0)])),
                solve_ms,
                violation,
                command: cmd,
                reference,
                payload_mass: payload.effective_mass(),
            };
            records.push(record.clone());
            last = Some(record);

            let feet = [frames[0].position, frames[1].position];
            let external = s.disturbance_at(t, &self.state.rotation());
            let next =
                nonlinear_derivative(&self.state, model, &feet, &payload, &applied, &external)
                    .and_then(|d| integrate_step(&self.state, &d, dt));
            self.anchor.advance(&cmd, dt, &self.state, REFERENCE_LEAD);
            match next {
                Ok(x) => self.state = x,
                Err(_) => {
                    fall_time = Some(t + dt);
                    break;
                }
            }
            if self.fallen() {
                fall_time = Some(t + dt);
                break;
            }
        }
        if let Some(mut r) = last {
            r.t = records.len() as f64 * dt;
            r.state = self.state;
            r.solve_ms = None;
            r.reference = Vector3::new(
                self.anchor.position.x,
                self.anchor.position.y,
                self.reference_height(),
            );
            records.push(r);
        }
        let metrics = compute_metrics(&MetricInputs {
            records: &records,
            disturbances: &s.disturbances,
            torque_limits: &model.torque_limits,
            solve_ms: &solve_times,
            solver_failures: failures,
            fall_time,
        });
        Ok(SimLog {
            records,
            solve_ms: solve_times,
            solver_failures: failures,
            first_failure,
            fall_time,
            metrics,
        })
    }

    fn fallen(&self) -> bool {
        let x = &self.state;
        !x.is_finite()
            || x.euler.x.abs() > FALL_TILT
            || x.euler.y.abs() > FALL_TILT
            || x.position.z - self.terrain.height(x.position.x, x.position.y) < FALL_HEIGHT
    }
}

/// Runs a scenario to completion or until the robot falls. Configuration
/// errors are returned; solver failures and falls are recorded in the log.
pub fn run_scenario(s: &Scenario) -> Result<SimLog> {
    s.validate()?;
    Simulator::new(s)?.run()
}
