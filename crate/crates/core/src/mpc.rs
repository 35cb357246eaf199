//! Convex MPC over ground reaction wrenches.
//!
//! The linearized single rigid body model is rolled out over `h` steps and
//! turned into a QP either in sparse form (states and inputs as decision
//! variables, dynamics as equality rows) or condensed form (states
//! eliminated). Both share the same contact constraint rows.

use std::fmt;
use std::ops::AddAssign;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    euler_rate_map_inv, skew, world_inertia, yaw_rotation, AugmentedState, ContinuousA,
    ContinuousB, ControlInput, LinearizationPoint, PayloadLoad, RobotState, AUG_DIM, INPUT_DIM,
    SINGULARITY_EPS,
};
use crate::error::{invalid, Error, Result};
use crate::kinematics::{level_foot_rotation, raibert_target, FootPose};
use crate::model::{ContactPlan, GaitMode, GaitSchedule, Leg, RobotModel};
use crate::qp::{self, QpData, QpError, SolverSettings};

pub type FootFrame = FootPose;

/// Ceiling on the prediction window `h · dt`.
pub const MAX_LOOKAHEAD: f64 = 1.5;
pub const MAX_FREQUENCY: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    #[default]
    Condensed,
    #[serde(alias = "non-condensed", alias = "sparse")]
    Noncondensed,
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Formulation::Condensed => "condensed",
            Formulation::Noncondensed => "noncondensed",
        })
    }
}

impl std::str::FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "condensed" => Ok(Self::Condensed),
            "noncondensed" | "non-condensed" | "sparse" => Ok(Self::Noncondensed),
            other => invalid(format!("unknown MPC formulation '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Step of the prediction model (s).
    pub dt: f64,
    /// State weights over `[p; Θ; ṗ; ω; 1]`.
    pub q: [f64; 13],
    /// Input weights over `[F1; F2; M1; M2]`.
    pub r: [f64; 12],
    /// Re-solve rate (Hz).
    pub frequency: f64,
    pub formulation: Formulation,
    /// Penalize inputs relative to an even split of the supported weight
    /// instead of relative to zero.
    pub gravity_feedforward: bool,
    /// Add the first-order effect of CoM displacement on the moment of the
    /// supported weight, so the prediction sees the body tip when the CoM
    /// moves away from the feet.
    pub lever_coupling: bool,
    #[serde(skip)]
    pub solver: SolverSettings,
}

impl Default for MpcConfig {
    fn default() -> Self {
        let mut r = [1e-3; 12];
        for w in &mut r[6..] {
            *w = 5e-3;
        }
        Self {
            horizon: 10,
            dt: 0.05,
            q: [
                500.0, 500.0, 500.0, 150.0, 150.0, 150.0, 1.0, 1.0, 3.0, 1.0, 1.0, 1.0, 0.0,
            ],
            r,
            frequency: 100.0,
            formulation: Formulation::Condensed,
            gravity_feedforward: true,
            lever_coupling: true,
            solver: SolverSettings::default(),
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return invalid("mpc.horizon must be >= 1");
        }
        if !(self.dt > 0.0) {
            return invalid(format!("mpc.dt must be > 0 (got {})", self.dt));
        }
        if self.horizon as f64 * self.dt > MAX_LOOKAHEAD + 1e-12 {
            return invalid(format!(
                "mpc lookahead {:.3} s exceeds {MAX_LOOKAHEAD} s",
                self.horizon as f64 * self.dt
            ));
        }
        if !(self.frequency > 0.0 && self.frequency <= MAX_FREQUENCY) {
            return invalid(format!(
                "mpc.frequency must be in (0, {MAX_FREQUENCY}] Hz (got {})",
                self.frequency
            ));
        }
        if self.q.iter().any(|w| !(*w >= 0.0)) {
            return invalid("mpc.q weights must be >= 0");
        }
        if self.r.iter().any(|w| !(*w > 0.0)) {
            return invalid("mpc.r weights must be > 0");
        }
        Ok(())
    }
}

/// Commanded planar velocity in the heading frame plus yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Command {
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
}

impl Command {
    pub fn new(vx: f64, vy: f64, yaw_rate: f64) -> Self {
        Self { vx, vy, yaw_rate }
    }

    /// Commanded velocity in the world frame for heading `yaw`.
    pub fn world_velocity(&self, yaw: f64) -> Vector3<f64> {
        yaw_rotation(yaw) * Vector3::new(self.vx, self.vy, 0.0)
    }
}

/// Desired planar position and heading at the current time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceAnchor {
    pub position: Vector2<f64>,
    pub yaw: f64,
}

impl ReferenceAnchor {
    pub fn from_state(state: &RobotState) -> Self {
        Self {
            position: state.position.xy(),
            yaw: state.euler.z,
        }
    }

    /// Integrates the command over `dt` and keeps the anchor within
    /// `max_lead` (m, and rad for yaw) of the measured state.
    pub fn advance(&mut self, cmd: &Command, dt: f64, state: &RobotState, max_lead: f64) {
        self.position += cmd.world_velocity(self.yaw).xy() * dt;
        self.yaw += cmd.yaw_rate * dt;
        let lead = self.position - state.position.xy();
        if lead.norm() > max_lead {
            self.position = state.position.xy() + lead * (max_lead / lead.norm());
        }
        self.yaw = state.euler.z + (self.yaw - state.euler.z).clamp(-max_lead, max_lead);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    /// `x_ref[1..=h]`.
    pub states: Vec<AugmentedState>,
    /// Input each `u_k` is penalized against; zero unless feedforward is set.
    pub inputs: Vec<ControlInput>,
}

impl ReferenceTrajectory {
    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    pub fn position(&self, k: usize) -> Vector3<f64> {
        self.states[k].fixed_rows::<3>(0).into()
    }

    pub fn yaw(&self, k: usize) -> f64 {
        self.states[k][5]
    }

    pub fn stacked(&self) -> DVector<f64> {
        DVector::from_iterator(
            AUG_DIM * self.states.len(),
            self.states.iter().flat_map(|x| x.iter().copied()),
        )
    }

    pub fn stacked_inputs(&self) -> DVector<f64> {
        DVector::from_iterator(
            INPUT_DIM * self.inputs.len(),
            self.inputs.iter().flat_map(|u| u.0.iter().copied()),
        )
    }

    /// Sets each step's input reference to the robot and payload weight
    /// shared evenly by the stance legs.
    pub fn with_feedforward(mut self, plan: &ContactPlan, model: &RobotModel) -> Self {
        for (k, u) in self.inputs.iter_mut().enumerate() {
            *u = ControlInput::default();
            let legs = plan.stance[k].iter().filter(|s| **s).count();
            if legs == 0 {
                continue;
            }
            let payload = if plan.payload_contact[k] {
                plan.payload_mass[k]
            } else {
                0.0
            };
            let fz = (model.mass + payload) * model.gravity / legs as f64;
            for leg in Leg::BOTH {
                if plan.stance[k][leg.index()] {
                    u.set_force(leg, &Vector3::new(0.0, 0.0, fz));
                }
            }
        }
        self
    }
}

pub fn build_reference(
    cmd: &Command,
    state: &RobotState,
    cfg: &MpcConfig,
    height: f64,
) -> ReferenceTrajectory {
    build_reference_from(cmd, &ReferenceAnchor::from_state(state), cfg, height)
}

pub fn build_reference_from(
    cmd: &Command,
    anchor: &ReferenceAnchor,
    cfg: &MpcConfig,
    height: f64,
) -> ReferenceTrajectory {
    let mut xy = anchor.position;
    let mut states = Vec::with_capacity(cfg.horizon);
    for k in 1..=cfg.horizon {
        let yaw = anchor.yaw + cmd.yaw_rate * cfg.dt * k as f64;
        let v = cmd.world_velocity(yaw);
        xy += v.xy() * cfg.dt;
        let mut x = AugmentedState::zeros();
        x[0] = xy.x;
        x[1] = xy.y;
        x[2] = height;
        x[5] = yaw;
        x[6] = v.x;
        x[7] = v.y;
        x[11] = cmd.yaw_rate;
        x[12] = 1.0;
        states.push(x);
    }
    ReferenceTrajectory {
        inputs: vec![ControlInput::default(); states.len()],
        states,
    }
}

/// Touchdown point for `leg` given the CoM and heading expected at
/// touchdown.
#[allow(clippy::too_many_arguments)]
pub fn touchdown_target(
    model: &RobotModel,
    gait: &GaitSchedule,
    leg: Leg,
    com: &Vector3<f64>,
    yaw: f64,
    velocity: &Vector3<f64>,
    velocity_cmd: &Vector3<f64>,
    ground_height: f64,
) -> Vector3<f64> {
    let mut hip_offset = yaw_rotation(yaw) * model.hip_in_body(leg);
    hip_offset.z = 0.0;
    let mut v = *velocity;
    v.z = 0.0;
    raibert_target(
        &(com + hip_offset),
        &v,
        velocity_cmd,
        gait.stance_duration(leg),
        gait.raibert_gain,
        ground_height,
    )
}

/// Foot frames for each horizon step. Legs in stance now keep their
/// measured contact for the rest of that stance; legs that touch down inside
/// the horizon use the touchdown heuristic evaluated on the reference, with
/// `velocities[k]` the CoM velocity expected at the start of step `k`.
#[allow(clippy::too_many_arguments)]
pub fn predict_foot_positions(
    model: &RobotModel,
    state: &RobotState,
    gait: &GaitSchedule,
    plan: &ContactPlan,
    cmd: &Command,
    reference: &ReferenceTrajectory,
    measured: &[FootFrame; 2],
    velocities: &[Vector3<f64>],
    ground_height: f64,
) -> Vec<[FootFrame; 2]> {
    let h = plan.horizon();
    let mut out = vec![*measured; h];
    if gait.mode == GaitMode::Standing {
        return out;
    }
    let com_at = |k: usize| {
        if k == 0 {
            state.position
        } else {
            reference.position(k - 1)
        }
    };
    let yaw_at = |k: usize| {
        if k == 0 {
            state.euler.z
        } else {
            reference.yaw(k - 1)
        }
    };
    let velocity_at = |k: usize| {
        velocities
            .get(k)
            .or(velocities.last())
            .copied()
            .unwrap_or(state.velocity)
    };
    for leg in Leg::BOTH {
        let i = leg.index();
        let mut current = measured[i];
        let mut in_initial_stance = plan.stance[0][i];
        for k in 0..h {
            let stance = plan.stance[k][i];
            if !stance {
                in_initial_stance = false;
            } else if !in_initial_stance && (k == 0 || !plan.stance[k - 1][i]) {
                let yaw = yaw_at(k);
                let position = touchdown_target(
                    model,
                    gait,
                    leg,
                    &com_at(k),
                    yaw,
                    &velocity_at(k),
                    &cmd.world_velocity(yaw),
                    ground_height,
                );
                current = FootFrame {
                    position,
                    rotation: level_foot_rotation(yaw),
                };
            }
            out[k][i] = current;
        }
    }
    out
}

/// CoM velocities expected at the start of each of `horizon` steps, read
/// off a previous prediction made `elapsed` seconds ago. Step 0 is the
/// measured velocity; steps past the old prediction hold its last value.
pub fn planned_velocities(
    previous: &[AugmentedState],
    elapsed: f64,
    dt: f64,
    horizon: usize,
    measured: &Vector3<f64>,
) -> Vec<Vector3<f64>> {
    let mut out = vec![*measured; horizon];
    if previous.is_empty() {
        return out;
    }
    for (k, v) in out.iter_mut().enumerate().skip(1) {
        // previous[j] holds the state at elapsed-relative time (j + 1) dt.
        let j = ((elapsed / dt + k as f64).round() as usize).saturating_sub(1);
        let x = previous[j.min(previous.len() - 1)];
        *v = Vector3::new(x[6], x[7], x[8]);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    FrictionX,
    FrictionY,
    ForceMin,
    ForceMax,
    RollMoment,
    Tipping,
    YawFriction,
    Swing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstraintLabel {
    pub step: usize,
    pub leg: Leg,
    pub kind: ConstraintKind,
}

impl fmt::Display for ConstraintLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ConstraintKind::FrictionX => "friction pyramid (x)",
            ConstraintKind::FrictionY => "friction pyramid (y)",
            ConstraintKind::ForceMin => "minimum normal force",
            ConstraintKind::ForceMax => "maximum normal force",
            ConstraintKind::RollMoment => "zero roll moment",
            ConstraintKind::Tipping => "toe/heel tipping",
            ConstraintKind::YawFriction => "yaw friction wrench cone",
            ConstraintKind::Swing => "swing leg zero wrench",
        };
        write!(f, "{kind}, {:?} leg, step {}", self.leg, self.step)
    }
}

/// One inequality on a single leg's wrench `[F; M]`: `coeffs · w <= bound`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LegRow {
    pub coeffs: [f64; 6],
    pub bound: f64,
    pub kind: ConstraintKind,
}

/// Contact rows for one leg at one step.
pub fn leg_rows(model: &RobotModel, frame: &FootFrame, stance: bool) -> Vec<LegRow> {
    use ConstraintKind::*;
    let row = |f: Vector3<f64>, m: Vector3<f64>, bound: f64, kind| LegRow {
        coeffs: [f.x, f.y, f.z, m.x, m.y, m.z],
        bound,
        kind,
    };
    let zero = Vector3::zeros();
    if !stance {
        return (0..6)
            .flat_map(|j| {
                [1.0, -1.0].map(|s| {
                    let mut coeffs = [0.0; 6];
                    coeffs[j] = s;
                    LegRow {
                        coeffs,
                        bound: 0.0,
                        kind: Swing,
                    }
                })
            })
            .collect();
    }
    let mu = model.pyramid_friction();
    let (lt, lh) = (model.toe_length, model.heel_length);
    let ex = Vector3::x();
    let ey = Vector3::y();
    let ez = Vector3::z();
    // Foot-frame components are dot products with the columns of R_f.
    let rx: Vector3<f64> = frame.rotation.column(0).into();
    let ry: Vector3<f64> = frame.rotation.column(1).into();
    let rz: Vector3<f64> = frame.rotation.column(2).into();
    vec![
        row(ex - ez * mu, zero, 0.0, FrictionX),
        row(-ex - ez * mu, zero, 0.0, FrictionX),
        row(ey - ez * mu, zero, 0.0, FrictionY),
        row(-ey - ez * mu, zero, 0.0, FrictionY),
        row(-ez, zero, -model.force_min, ForceMin),
        row(ez, zero, model.force_max, ForceMax),
        row(zero, rx, 0.0, RollMoment),
        row(zero, -rx, 0.0, RollMoment),
        row(-rz * lh, ry, 0.0, Tipping),
        row(-rz * lt, -ry, 0.0, Tipping),
        row(ry * lh - rz * (mu * lh), rz + ry * mu, 0.0, YawFriction),
        row(-ry * lh - rz * (mu * lh), -rz + ry * mu, 0.0, YawFriction),
        row(ry * lt - rz * (mu * lt), -rz - ry * mu, 0.0, YawFriction),
        row(-ry * lt - rz * (mu * lt), rz - ry * mu, 0.0, YawFriction),
    ]
}

/// Largest violation of the contact rows by an applied input (0 if all hold).
pub fn input_violation(
    model: &RobotModel,
    frames: &[FootFrame; 2],
    stance: [bool; 2],
    u: &ControlInput,
) -> f64 {
    let mut worst = 0.0f64;
    for leg in Leg::BOTH {
        let i = leg.index();
        let f = u.force(leg);
        let m = u.moment(leg);
        let w = [f.x, f.y, f.z, m.x, m.y, m.z];
        for r in leg_rows(model, &frames[i], stance[i]) {
            let lhs: f64 = r.coeffs.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
            worst = worst.max(lhs - r.bound);
        }
    }
    worst
}

/// Inequalities `C U <= d` on the stacked inputs.
#[derive(Debug, Clone)]
pub struct Inequalities {
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    pub labels: Vec<ConstraintLabel>,
}

pub fn assemble_inequalities(
    plan: &ContactPlan,
    frames: &[[FootFrame; 2]],
    model: &RobotModel,
) -> Result<Inequalities> {
    let h = plan.horizon();
    if frames.len() != h {
        return Err(Error::Dimension {
            context: "foot frames",
            expected: h,
            actual: frames.len(),
        });
    }
    let mut rows = Vec::new();
    for k in 0..h {
        for leg in Leg::BOTH {
            let i = leg.index();
            for r in leg_rows(model, &frames[k][i], plan.stance[k][i]) {
                rows.push((k, leg, r));
            }
        }
    }
    let mut c = DMatrix::zeros(rows.len(), INPUT_DIM * h);
    let mut d = DVector::zeros(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (n, (k, leg, r)) in rows.into_iter().enumerate() {
        let base = INPUT_DIM * k;
        let fi = base + 3 * leg.index();
        let mi = base + 6 + 3 * leg.index();
        for j in 0..3 {
            c[(n, fi + j)] = r.coeffs[j];
            c[(n, mi + j)] = r.coeffs[3 + j];
        }
        d[n] = r.bound;
        labels.push(ConstraintLabel {
            step: k,
            leg,
            kind: r.kind,
        });
    }
    Ok(Inequalities { c, d, labels })
}

/// Everything the controller knows when it solves.
#[derive(Debug, Clone)]
pub struct MpcInputs {
    pub state: RobotState,
    pub reference: ReferenceTrajectory,
    pub plan: ContactPlan,
    pub feet: Vec<[FootFrame; 2]>,
    /// Payload CoM offset from the robot CoM, body frame.
    pub payload_offset: Vector3<f64>,
}

pub type StepModel = (ContinuousA, ContinuousB);

/// Discrete `(A_k, B_k)` for each step. Inertia is taken from the current
/// attitude; the Euler-rate map uses current roll/pitch with reference yaw;
/// lever arms are measured from the reference CoM of each step.
pub fn step_models(
    inputs: &MpcInputs,
    model: &RobotModel,
    cfg: &MpcConfig,
) -> Result<Vec<StepModel>> {
    let h = inputs.plan.horizon();
    if inputs.reference.horizon() != h {
        return Err(Error::Dimension {
            context: "reference trajectory",
            expected: h,
            actual: inputs.reference.horizon(),
        });
    }
    if inputs.feet.len() != h {
        return Err(Error::Dimension {
            context: "foot frames",
            expected: h,
            actual: inputs.feet.len(),
        });
    }
    let rot = inputs.state.rotation();
    let inertia_inv = world_inertia(&rot, &model.inertia_diag())
        .try_inverse()
        .ok_or(Error::Contract("world inertia not invertible"))?;
    let offset_world = rot * inputs.payload_offset;
    (0..h)
        .map(|k| {
            let (com, yaw) = if k == 0 {
                (inputs.state.position, inputs.state.euler.z)
            } else {
                (
                    inputs.reference.position(k - 1),
                    inputs.reference.yaw(k - 1),
                )
            };
            let euler = Vector3::new(inputs.state.euler.x, inputs.state.euler.y, yaw);
            let point = LinearizationPoint {
                euler_rate_inv: euler_rate_map_inv(&euler, SINGULARITY_EPS)?,
                inertia_inv,
                com,
            };
            let payload = PayloadLoad {
                mass: inputs.plan.payload_mass[k],
                offset_world,
                contact: inputs.plan.payload_contact[k],
            };
            let feet = [inputs.feet[k][0].position, inputs.feet[k][1].position];
            let (mut a, b) =
                crate::dynamics::linearize(&point, model, &feet, &payload, inputs.plan.stance[k]);
            if cfg.lever_coupling && inputs.plan.stance[k].iter().any(|s| *s) {
                // τ = Σ (p_f − p_c) × F ≈ … + F̄ × (p_c − p̄_c) with F̄ the supported weight.
                let weight = Vector3::new(
                    0.0,
                    0.0,
                    (model.mass + payload.effective_mass()) * model.gravity,
                );
                let coupling = inertia_inv * skew(&weight);
                a.fixed_view_mut::<3, 3>(9, 0).copy_from(&coupling);
                let offset = -(coupling * com);
                a.fixed_view_mut::<3, 1>(9, 12).add_assign(&offset);
            }
            Ok(crate::dynamics::discretize(&a, &b, cfg.dt))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `[u_0; …; u_{h-1}]`.
    Condensed { horizon: usize },
    /// `[x_1; …; x_h; u_0; …; u_{h-1}]`.
    Noncondensed { horizon: usize },
}

impl Layout {
    pub fn horizon(&self) -> usize {
        match *self {
            Layout::Condensed { horizon } | Layout::Noncondensed { horizon } => horizon,
        }
    }

    /// Offset of `u_k` in the decision vector.
    pub fn input_offset(&self, k: usize) -> usize {
        match *self {
            Layout::Condensed { .. } => INPUT_DIM * k,
            Layout::Noncondensed { horizon } => AUG_DIM * horizon + INPUT_DIM * k,
        }
    }

    pub fn len(&self) -> usize {
        match *self {
            Layout::Condensed { horizon } => INPUT_DIM * horizon,
            Layout::Noncondensed { horizon } => (AUG_DIM + INPUT_DIM) * horizon,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    pub layout: Layout,
}

impl QpProblem {
    pub fn data(&self) -> QpData<'_> {
        QpData {
            h: &self.h,
            f: &self.f,
            a_eq: &self.a_eq,
            b_eq: &self.b_eq,
            c: &self.c,
            d: &self.d,
        }
    }

    pub fn input(&self, z: &DVector<f64>, k: usize) -> ControlInput {
        let off = self.layout.input_offset(k);
        ControlInput(z.fixed_rows::<INPUT_DIM>(off).into())
    }

    pub fn inputs(&self, z: &DVector<f64>) -> DVector<f64> {
        let off = self.layout.input_offset(0);
        z.rows(off, INPUT_DIM * self.layout.horizon()).into_owned()
    }
}

fn check_models(models: &[StepModel], h: usize) -> Result<()> {
    if models.len() != h {
        return Err(Error::Dimension {
            context: "step models",
            expected: h,
            actual: models.len(),
        });
    }
    Ok(())
}

pub fn build_noncondensed(
    x0: &AugmentedState,
    reference: &ReferenceTrajectory,
    models: &[StepModel],
    ineq: &Inequalities,
    cfg: &MpcConfig,
) -> Result<QpProblem> {
    let h = reference.horizon();
    check_models(models, h)?;
    let (nx, nu) = (AUG_DIM, INPUT_DIM);
    let n = (nx + nu) * h;
    let mut hess = DMatrix::zeros(n, n);
    let mut f = DVector::zeros(n);
    for k in 0..h {
        for i in 0..nx {
            hess[(nx * k + i, nx * k + i)] = cfg.q[i];
            f[nx * k + i] = -cfg.q[i] * reference.states[k][i];
        }
        for i in 0..nu {
            let j = nx * h + nu * k + i;
            hess[(j, j)] = cfg.r[i];
            f[j] = -cfg.r[i] * reference.inputs[k].0[i];
        }
    }
    let mut a_eq = DMatrix::zeros(nx * h, n);
    let mut b_eq = DVector::zeros(nx * h);
    for (k, (a, b)) in models.iter().enumerate() {
        let r = nx * k;
        a_eq.view_mut((r, nx * k), (nx, nx)).fill_with_identity();
        a_eq.view_mut((r, nx * h + nu * k), (nx, nu))
            .copy_from(&(-b));
        if k == 0 {
            b_eq.rows_mut(0, nx).copy_from(&(a * x0));
        } else {
            a_eq.view_mut((r, nx * (k - 1)), (nx, nx)).copy_from(&(-a));
        }
    }
    let mut c = DMatrix::zeros(ineq.c.nrows(), n);
    c.view_mut((0, nx * h), (ineq.c.nrows(), nu * h))
        .copy_from(&ineq.c);
    Ok(QpProblem {
        h: hess,
        f,
        a_eq,
        b_eq,
        c,
        d: ineq.d.clone(),
        layout: Layout::Noncondensed { horizon: h },
    })
}

/// Prediction matrices with `X = A_qp x0 + B_qp U`.
pub fn prediction_matrices(models: &[StepModel]) -> (DMatrix<f64>, DMatrix<f64>) {
    let h = models.len();
    let (nx, nu) = (AUG_DIM, INPUT_DIM);
    let mut aqp = DMatrix::zeros(nx * h, nx);
    let mut bqp = DMatrix::zeros(nx * h, nu * h);
    let mut prod = ContinuousA::identity();
    for k in 0..h {
        let (a, b) = &models[k];
        prod = a * prod;
        aqp.view_mut((nx * k, 0), (nx, nx)).copy_from(&prod);
        // Block row k: A_k · (block row k-1) then B_k on the diagonal.
        if k > 0 {
            let prev = bqp.view((nx * (k - 1), 0), (nx, nu * k)).into_owned();
            let next = a * prev;
            bqp.view_mut((nx * k, 0), (nx, nu * k)).copy_from(&next);
        }
        bqp.view_mut((nx * k, nu * k), (nx, nu)).copy_from(b);
    }
    (aqp, bqp)
}

pub fn build_condensed(
    x0: &AugmentedState,
    reference: &ReferenceTrajectory,
    models: &[StepModel],
    ineq: &Inequalities,
    cfg: &MpcConfig,
) -> Result<QpProblem> {
    build_condensed_with(x0, reference, models, ineq, cfg, false)
}

/// Condensed builder with an optional sign flip of `B_qp`, used by the
/// self-check to confirm that a corrupted model is caught.
#[doc(hidden)]
pub fn build_condensed_with(
    x0: &AugmentedState,
    reference: &ReferenceTrajectory,
    models: &[StepModel],
    ineq: &Inequalities,
    cfg: &MpcConfig,
    negate_input_map: bool,
) -> Result<QpProblem> {
    let h = reference.horizon();
    check_models(models, h)?;
    let (nx, nu) = (AUG_DIM, INPUT_DIM);
    let (aqp, mut bqp) = prediction_matrices(models);
    if negate_input_map {
        bqp.neg_mut();
    }
    let qbar = DVector::from_iterator(nx * h, (0..h).flat_map(|_| cfg.q.iter().copied()));
    // Q̄ B_qp by row scaling.
    let mut qb = bqp.clone();
    for (i, mut row) in qb.row_iter_mut().enumerate() {
        row *= qbar[i];
    }
    let mut hess = bqp.tr_mul(&qb);
    for k in 0..h {
        for i in 0..nu {
            hess[(nu * k + i, nu * k + i)] += cfg.r[i];
        }
    }
    hess *= 2.0;
    // Symmetrize away round-off.
    let hess = (&hess + hess.transpose()) * 0.5;
    let free = &aqp * DVector::from_column_slice(x0.as_slice()) - reference.stacked();
    let mut f = qb.tr_mul(&free) * 2.0;
    let u_ref = reference.stacked_inputs();
    for k in 0..h {
        for i in 0..nu {
            f[nu * k + i] -= 2.0 * cfg.r[i] * u_ref[nu * k + i];
        }
    }
    Ok(QpProblem {
        h: hess,
        f,
        a_eq: DMatrix::zeros(0, nu * h),
        b_eq: DVector::zeros(0),
        c: ineq.c.clone(),
        d: ineq.d.clone(),
        layout: Layout::Condensed { horizon: h },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MpcDiagnostics {
    /// `Σ (x_k - x_ref,k)ᵀ Q (x_k - x_ref,k) + (u_k - u_ref,k)ᵀ R (u_k - u_ref,k)`
    /// at the solution.
    pub objective: f64,
    pub iterations: usize,
    pub solve_seconds: f64,
    /// Largest violation of the step-0 contact rows by the returned input.
    pub max_violation: f64,
}

#[derive(Debug, Clone)]
pub struct MpcSolution {
    pub u: ControlInput,
    /// Stacked inputs over the horizon.
    pub inputs: DVector<f64>,
    /// Predicted states after each horizon step.
    pub states: Vec<AugmentedState>,
    pub diagnostics: MpcDiagnostics,
}

/// States after each step of a stacked input sequence.
pub fn rollout(
    x0: &AugmentedState,
    models: &[StepModel],
    inputs: &DVector<f64>,
) -> Vec<AugmentedState> {
    let mut x = *x0;
    models
        .iter()
        .enumerate()
        .map(|(k, (a, b))| {
            x = a * x + b * inputs.fixed_rows::<INPUT_DIM>(INPUT_DIM * k);
            x
        })
        .collect()
}

/// Tracking plus effort cost of a stacked input sequence, rolled out
/// through the step models.
pub fn horizon_cost(
    x0: &AugmentedState,
    reference: &ReferenceTrajectory,
    models: &[StepModel],
    inputs: &DVector<f64>,
    cfg: &MpcConfig,
) -> f64 {
    let mut x = *x0;
    let mut cost = 0.0;
    for (k, (a, b)) in models.iter().enumerate() {
        let u = inputs.fixed_rows::<INPUT_DIM>(INPUT_DIM * k);
        x = a * x + b * u;
        let e = x - reference.states[k];
        let du = u - reference.inputs[k].0;
        cost += (0..AUG_DIM).map(|i| cfg.q[i] * e[i] * e[i]).sum::<f64>();
        cost += (0..INPUT_DIM)
            .map(|i| cfg.r[i] * du[i] * du[i])
            .sum::<f64>();
    }
    cost
}

/// The caller's reference with input feedforward applied if configured.
pub fn effective_reference(
    inputs: &MpcInputs,
    model: &RobotModel,
    cfg: &MpcConfig,
) -> ReferenceTrajectory {
    if cfg.gravity_feedforward {
        inputs
            .reference
            .clone()
            .with_feedforward(&inputs.plan, model)
    } else {
        inputs.reference.clone()
    }
}

/// Builds the problem in the requested form. Also returns the step models
/// and inequality labels for diagnostics.
pub fn build_problem(
    inputs: &MpcInputs,
    model: &RobotModel,
    cfg: &MpcConfig,
    formulation: Formulation,
) -> Result<(QpProblem, Vec<StepModel>, Inequalities)> {
    model.validate()?;
    cfg.validate()?;
    let models = step_models(inputs, model, cfg)?;
    let ineq = assemble_inequalities(&inputs.plan, &inputs.feet, model)?;
    let x0 = inputs.state.augmented();
    let reference = effective_reference(inputs, model, cfg);
    let qp = match formulation {
        Formulation::Condensed => build_condensed(&x0, &reference, &models, &ineq, cfg)?,
        Formulation::Noncondensed => build_noncondensed(&x0, &reference, &models, &ineq, cfg)?,
    };
    Ok((qp, models, ineq))
}

pub fn solve_mpc(
    inputs: &MpcInputs,
    model: &RobotModel,
    cfg: &MpcConfig,
    formulation: Formulation,
) -> Result<MpcSolution> {
    let (qp, models, ineq) = build_problem(inputs, model, cfg, formulation)?;
    solve_problem(inputs, model, cfg, &qp, &models, &ineq)
}

/// Solves an assembled problem and post-processes the first input.
pub fn solve_problem(
    inputs: &MpcInputs,
    model: &RobotModel,
    cfg: &MpcConfig,
    qp: &QpProblem,
    models: &[StepModel],
    ineq: &Inequalities,
) -> Result<MpcSolution> {
    let start = Instant::now();
    let sol = qp::solve(&qp.data(), &cfg.solver, None).map_err(|e| match e {
        QpError::Infeasible { row, violation } => Error::Infeasible {
            constraint: ineq
                .labels
                .get(row)
                .map(|l| l.to_string())
                .unwrap_or_else(|| format!("row {row}")),
            violation,
        },
        QpError::IterationLimit(s) => Error::IterationLimit {
            iterations: s.iterations,
        },
        other => Error::Qp(other),
    })?;
    let solve_seconds = start.elapsed().as_secs_f64();

    let mut stacked = qp.inputs(&sol.x);
    for (k, stance) in inputs.plan.stance.iter().enumerate() {
        for leg in Leg::BOTH {
            if !stance[leg.index()] {
                let base = INPUT_DIM * k;
                stacked.rows_mut(base + 3 * leg.index(), 3).fill(0.0);
                stacked.rows_mut(base + 6 + 3 * leg.index(), 3).fill(0.0);
            }
        }
    }
    let u = ControlInput(stacked.fixed_rows::<INPUT_DIM>(0).into());
    let max_violation = input_violation(model, &inputs.feet[0], inputs.plan.stance[0], &u);
    let reference = effective_reference(inputs, model, cfg);
    let x0 = inputs.state.augmented();
    let objective = horizon_cost(&x0, &reference, models, &stacked, cfg);
    Ok(MpcSolution {
        u,
        states: rollout(&x0, models, &stacked),
        inputs: stacked,
        diagnostics: MpcDiagnostics {
            objective,
            iterations: sol.iterations,
            solve_seconds,
            max_violation,
        },
    })
}

/// Level foot frames at the given contact points.
pub fn level_frames(positions: &[Vector3<f64>; 2], yaw: f64) -> [FootFrame; 2] {
    let rotation: Matrix3<f64> = level_foot_rotation(yaw);
    [
        FootFrame {
            position: positions[0],
            rotation,
        },
        FootFrame {
            position: positions[1],
            rotation,
        },
    ]
}

/// Standing problem at the nominal pose with feet under the hips; the
/// reference is the current state. Shared by tests, benchmarks and the
/// self-check.
pub fn standing_inputs(
    model: &RobotModel,
    cfg: &MpcConfig,
    payload_mass: f64,
    payload_offset: Vector3<f64>,
) -> MpcInputs {
    let state = RobotState::at_height(model.nominal_height);
    let feet = Leg::BOTH.map(|leg| {
        let hip = model.hip_in_body(leg);
        Vector3::new(hip.x, hip.y, 0.0)
    });
    let frames = level_frames(&feet, 0.0);
    let mut plan = ContactPlan::all_stance(cfg.horizon, cfg.dt);
    if payload_mass > 0.0 {
        plan.payload_mass = vec![payload_mass; cfg.horizon];
        plan.payload_contact = vec![true; cfg.horizon];
    }
    MpcInputs {
        reference: build_reference(&Command::default(), &state, cfg, model.nominal_height),
        state,
        plan,
        feet: vec![frames; cfg.horizon],
        payload_offset,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cfg() -> MpcConfig {
        MpcConfig::default()
    }

    #[test]
    fn default_weights() {
        let c = cfg();
        assert_eq!(c.q[12], 0.0);
        assert_eq!(c.r[0], 1e-3);
        assert_eq!(c.r[11], 5e-3);
        c.validate().unwrap();
    }

    #[test]
    fn config_bounds() {
        let mut c = cfg();
        c.horizon = 31;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.frequency = 400.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.horizon = 0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.horizon = 30;
        c.validate().unwrap();
    }

    #[test]
    fn reference_at_rest() {
        let state = RobotState::at_height(0.55);
        let r = build_reference(&Command::default(), &state, &cfg(), 0.55);
        assert_eq!(r.horizon(), 10);
        for x in &r.states {
            assert_eq!(*x, state.augmented());
        }
    }

    #[test]
    fn reference_integrates_forward_speed() {
        let state = RobotState::at_height(0.55);
        let r = build_reference(&Command::new(0.6, 0.0, 0.0), &state, &cfg(), 0.55);
        for (k, x) in r.states.iter().enumerate() {
            assert_relative_eq!(x[0], 0.03 * (k + 1) as f64, epsilon = 1e-12);
            assert_eq!(x[6], 0.6);
            assert_eq!(x[12], 1.0);
            assert_eq!(x[3], 0.0);
            assert_eq!(x[4], 0.0);
        }
    }

    #[test]
    fn reference_yaw_steps() {
        let state = RobotState::at_height(0.55);
        let r = build_reference(&Command::new(0.0, 0.0, 2.0), &state, &cfg(), 0.55);
        for k in 1..r.horizon() {
            assert_relative_eq!(r.yaw(k) - r.yaw(k - 1), 0.1, epsilon = 1e-12);
            assert_eq!(r.states[k][11], 2.0);
        }
    }

    #[test]
    fn anchor_is_clamped_to_state() {
        let state = RobotState::at_height(0.55);
        let mut a = ReferenceAnchor::from_state(&state);
        for _ in 0..1000 {
            a.advance(&Command::new(1.0, 0.0, 1.0), 0.01, &state, 0.1);
        }
        assert!((a.position.norm() - 0.1).abs() < 1e-12);
        assert!((a.yaw - 0.1).abs() < 1e-12);
    }

    #[test]
    fn friction_coefficient_of_pyramid() {
        assert_relative_eq!(
            RobotModel::default().pyramid_friction(),
            0.35355,
            epsilon = 1e-5
        );
    }

    fn eval(rows: &[LegRow], w: [f64; 6]) -> Vec<f64> {
        rows.iter()
            .map(|r| {
                r.coeffs
                    .iter()
                    .zip(w.iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    - r.bound
            })
            .collect()
    }

    fn level() -> FootFrame {
        FootFrame {
            position: Vector3::zeros(),
            rotation: Matrix3::identity(),
        }
    }

    #[test]
    fn pure_support_force_has_margin() {
        let m = RobotModel::default();
        let rows = leg_rows(&m, &level(), true);
        assert_eq!(rows.len(), 14);
        let vals = eval(&rows, [0.0, 0.0, 100.0, 0.0, 0.0, 0.0]);
        for (r, v) in rows.iter().zip(&vals) {
            if r.kind != ConstraintKind::RollMoment {
                assert!(*v < 0.0, "{:?} {v}", r.kind);
            }
        }
        let tipping: Vec<f64> = rows
            .iter()
            .zip(&vals)
            .filter(|(r, _)| r.kind == ConstraintKind::Tipping)
            .map(|(_, v)| -v)
            .collect();
        assert_relative_eq!(
            tipping.iter().cloned().fold(f64::INFINITY, f64::min),
            5.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn toe_moment_bound() {
        let m = RobotModel::default();
        let rows = leg_rows(&m, &level(), true);
        let tip = |my: f64| {
            rows.iter()
                .zip(eval(&rows, [0.0, 0.0, 100.0, 0.0, my, 0.0]))
                .filter(|(r, _)| r.kind == ConstraintKind::Tipping)
                .map(|(_, v)| v)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        assert!(tip(-8.5) <= 0.0);
        assert!(tip(-9.5) > 0.0);
        assert!(tip(4.9) <= 0.0);
        assert!(tip(5.1) > 0.0);
    }

    /// Oracle: split the foot wrench onto a toe and a heel point force and
    /// check planar friction at each point directly.
    fn two_point_feasible(m: &RobotModel, w: [f64; 6]) -> bool {
        let (lt, lh) = (m.toe_length, m.heel_length);
        let mu = m.pyramid_friction();
        let len = lt + lh;
        let (fy, fz, my, mz) = (w[1], w[2], w[4], w[5]);
        let toe_z = (lh * fz - my) / len;
        let heel_z = (lt * fz + my) / len;
        let toe_y = (lh * fy + mz) / len;
        let heel_y = (lt * fy - mz) / len;
        toe_z >= 0.0 && heel_z >= 0.0 && toe_y.abs() <= mu * toe_z && heel_y.abs() <= mu * heel_z
    }

    proptest! {
        #[test]
        fn yaw_rows_match_two_point_contact(
            fy in -60.0f64..60.0, fz in 20.0f64..200.0, my in -15.0f64..10.0, mz in -10.0f64..10.0,
        ) {
            let m = RobotModel::default();
            let rows = leg_rows(&m, &level(), true);
            let w = [0.0, fy, fz, 0.0, my, mz];
            let ok = rows.iter().zip(eval(&rows, w))
                .filter(|(r, _)| matches!(r.kind, ConstraintKind::YawFriction | ConstraintKind::Tipping))
                .all(|(_, v)| v <= 1e-9);
            prop_assert_eq!(ok, two_point_feasible(&m, w));
        }

        #[test]
        fn rows_are_invariant_under_foot_yaw(yaw in -3.0f64..3.0, w in proptest::array::uniform6(-50.0f64..50.0)) {
            // Rotating the wrench together with the foot leaves the foot-frame
            // rows unchanged.
            let m = RobotModel::default();
            let r = level_foot_rotation(yaw);
            let f = r * Vector3::new(w[0], w[1], w[2]);
            let mm = r * Vector3::new(w[3], w[4], w[5]);
            let rotated = leg_rows(&m, &FootFrame { position: Vector3::zeros(), rotation: r }, true);
            let a = eval(&rotated, [f.x, f.y, f.z, mm.x, mm.y, mm.z]);
            let b = eval(&leg_rows(&m, &level(), true), w);
            for i in 6..14 {
                prop_assert!((a[i] - b[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn swing_rows_pin_wrench() {
        let rows = leg_rows(&RobotModel::default(), &level(), false);
        assert_eq!(rows.len(), 12);
        assert!(eval(&rows, [0.0; 6]).iter().all(|v| *v == 0.0));
        assert!(eval(&rows, [0.0, 0.0, 1.0, 0.0, 0.0, 0.0])
            .iter()
            .any(|v| *v > 0.0));
    }

    fn time_invariant(h: usize) -> Vec<StepModel> {
        let inputs = standing_inputs(
            &RobotModel::default(),
            &MpcConfig {
                horizon: h,
                ..cfg()
            },
            0.0,
            Vector3::zeros(),
        );
        let m = step_models(
            &inputs,
            &RobotModel::default(),
            &MpcConfig {
                horizon: h,
                ..cfg()
            },
        )
        .unwrap();
        vec![m[0]; h]
    }

    #[test]
    fn single_step_equality_structure() {
        let c = MpcConfig {
            horizon: 1,
            ..cfg()
        };
        let model = RobotModel::default();
        let inputs = standing_inputs(&model, &c, 0.0, Vector3::zeros());
        let (qp, models, _) =
            build_problem(&inputs, &model, &c, Formulation::Noncondensed).unwrap();
        let (a0, b0) = &models[0];
        assert_eq!(qp.a_eq.shape(), (13, 25));
        for i in 0..13 {
            for j in 0..13 {
                assert_eq!(qp.a_eq[(i, j)], if i == j { 1.0 } else { 0.0 });
            }
            for j in 0..12 {
                assert_eq!(qp.a_eq[(i, 13 + j)], -b0[(i, j)]);
            }
        }
        let ax0 = a0 * inputs.state.augmented();
        for i in 0..13 {
            assert_eq!(qp.b_eq[i], ax0[i]);
        }
    }

    #[test]
    fn sparse_problem_dimensions() {
        let model = RobotModel::default();
        let c = cfg();
        let inputs = standing_inputs(&model, &c, 0.0, Vector3::zeros());
        let (qp, _, _) = build_problem(&inputs, &model, &c, Formulation::Noncondensed).unwrap();
        assert_eq!(qp.a_eq.shape(), (130, 250));
        assert_eq!(qp.h.shape(), (250, 250));
        let (qp, _, _) = build_problem(&inputs, &model, &c, Formulation::Condensed).unwrap();
        assert_eq!(qp.h.shape(), (120, 120));
        assert_eq!(qp.a_eq.nrows(), 0);
        assert!((&qp.h - qp.h.transpose()).amax() <= 1e-12);
    }

    #[test]
    fn prediction_blocks_are_cumulative_products() {
        let models = time_invariant(3);
        let (a, b) = models[0];
        let (aqp, bqp) = prediction_matrices(&models);
        let blk = |r: usize, c: usize| bqp.view((13 * r, 12 * c), (13, 12)).into_owned();
        let close = |x: DMatrix<f64>, y: DMatrix<f64>| (x - y).amax() < 1e-12;
        let b = DMatrix::from_column_slice(13, 12, b.as_slice());
        let a = DMatrix::from_column_slice(13, 13, a.as_slice());
        assert!(close(blk(0, 0), b.clone()));
        assert!(close(blk(1, 0), &a * &b));
        assert!(close(blk(2, 0), &a * &a * &b));
        assert!(close(blk(1, 1), b.clone()));
        assert!(blk(0, 1).amax() == 0.0 && blk(0, 2).amax() == 0.0 && blk(1, 2).amax() == 0.0);
        assert!(close(
            aqp.view((26, 0), (13, 13)).into_owned(),
            &a * &a * &a
        ));
    }

    #[test]
    fn zero_state_weight_gives_zero_input() {
        let model = RobotModel::default();
        let mut c = cfg();
        c.q = [0.0; 13];
        c.horizon = 3;
        let inputs = standing_inputs(&model, &c, 0.0, Vector3::zeros());
        let models = step_models(&inputs, &model, &c).unwrap();
        let ineq = assemble_inequalities(&inputs.plan, &inputs.feet, &model).unwrap();
        let qp = build_condensed(
            &inputs.state.augmented(),
            &inputs.reference,
            &models,
            &ineq,
            &c,
        )
        .unwrap();
        for k in 0..36 {
            for j in 0..36 {
                let expect = if j == k { 2.0 * c.r[k % 12] } else { 0.0 };
                assert!((qp.h[(k, j)] - expect).abs() < 1e-15);
            }
        }
        assert!(qp.f.amax() < 1e-15);
    }

    fn total_fz(u: &ControlInput) -> f64 {
        u.force(Leg::Left).z + u.force(Leg::Right).z
    }

    #[test]
    fn standing_supports_body_weight() {
        let model = RobotModel::default();
        let c = cfg();
        for formulation in [Formulation::Condensed, Formulation::Noncondensed] {
            let inputs = standing_inputs(&model, &c, 0.0, Vector3::zeros());
            let sol = solve_mpc(&inputs, &model, &c, formulation).unwrap();
            assert!(
                (total_fz(&sol.u) - 156.96).abs() < 0.5,
                "{}",
                total_fz(&sol.u)
            );
            for leg in Leg::BOTH {
                assert!(sol.u.force(leg).xy().norm() < 0.5);
            }
            assert!(sol.diagnostics.max_violation <= 1e-6);
        }
    }

    #[test]
    fn standing_with_payload() {
        let model = RobotModel::default();
        let c = cfg();
        let inputs = standing_inputs(&model, &c, 8.0, Vector3::zeros());
        let sol = solve_mpc(&inputs, &model, &c, Formulation::Condensed).unwrap();
        assert!(
            (total_fz(&sol.u) - 235.44).abs() < 0.5,
            "{}",
            total_fz(&sol.u)
        );
    }

    #[test]
    fn offset_payload_moment_is_cancelled() {
        let model = RobotModel::default();
        let c = cfg();
        let offset = Vector3::new(0.1, 0.0, 0.2);
        let inputs = standing_inputs(&model, &c, 2.5, offset);
        let sol = solve_mpc(&inputs, &model, &c, Formulation::Condensed).unwrap();
        // Hand moment balance about the CoM.
        let com = inputs.state.position;
        let mut pitch = 0.0;
        for leg in Leg::BOTH {
            let r = inputs.feet[0][leg.index()].position - com;
            pitch += r.cross(&sol.u.force(leg)).y + sol.u.moment(leg).y;
        }
        let payload = offset.cross(&Vector3::new(0.0, 0.0, -9.81 * 2.5)).y;
        assert!((pitch + payload).abs() < 0.1, "{pitch} vs {payload}");
    }

    #[test]
    fn formulations_agree_on_short_horizon() {
        let model = RobotModel::default();
        let c = MpcConfig {
            horizon: 2,
            ..cfg()
        };
        let mut inputs = standing_inputs(&model, &c, 0.0, Vector3::zeros());
        inputs.state.velocity = Vector3::new(0.2, -0.1, 0.0);
        inputs.state.euler = Vector3::new(0.05, -0.03, 0.1);
        let a = solve_mpc(&inputs, &model, &c, Formulation::Condensed).unwrap();
        let b = solve_mpc(&inputs, &model, &c, Formulation::Noncondensed).unwrap();
        let scale = 1.0 + a.u.0.amax();
        assert!(
            (a.u.0 - b.u.0).amax() <= 1e-6 * scale,
            "{}",
            (a.u.0 - b.u.0).amax()
        );
    }

    #[test]
    fn swing_leg_input_is_zero() {
        let model = RobotModel::default();
        let c = cfg();
        let mut inputs = standing_inputs(&model, &c, 0.0, Vector3::zeros());
        for s in inputs.plan.stance.iter_mut().take(5) {
            *s = [true, false];
        }
        let sol = solve_mpc(&inputs, &model, &c, Formulation::Condensed).unwrap();
        assert_eq!(sol.u.force(Leg::Right), Vector3::zeros());
        assert_eq!(sol.u.moment(Leg::Right), Vector3::zeros());
        assert!(sol.u.force(Leg::Left).z > 100.0);
    }

    #[test]
    fn infeasible_force_bounds_are_reported() {
        let mut model = RobotModel::default();
        model.force_min = 300.0;
        model.force_max = 250.0;
        let c = MpcConfig {
            horizon: 2,
            ..cfg()
        };
        let inputs = standing_inputs(&RobotModel::default(), &c, 0.0, Vector3::zeros());
        let models = step_models(&inputs, &model, &c).unwrap();
        let ineq = assemble_inequalities(&inputs.plan, &inputs.feet, &model).unwrap();
        let qp = build_condensed(
            &inputs.state.augmented(),
            &inputs.reference,
            &models,
            &ineq,
            &c,
        )
        .unwrap();
        match solve_problem(&inputs, &model, &c, &qp, &models, &ineq) {
            Err(Error::Infeasible { constraint, .. }) => {
                assert!(constraint.contains("normal force"), "{constraint}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn standing_foot_prediction_uses_measurement() {
        let model = RobotModel::default();
        let c = cfg();
        let inputs = standing_inputs(&model, &c, 0.0, Vector3::zeros());
        let gait = GaitSchedule::standing();
        let feet = predict_foot_positions(
            &model,
            &inputs.state,
            &gait,
            &inputs.plan,
            &Command::default(),
            &inputs.reference,
            &inputs.feet[0],
            &[],
            0.0,
        );
        assert!(feet.iter().all(|f| f == &inputs.feet[0]));
    }

    #[test]
    fn walking_touchdown_is_held_and_under_hip() {
        let model = RobotModel::default();
        let c = cfg();
        let gait = GaitSchedule::walking(0.5);
        let state = RobotState::at_height(0.55);
        // Right leg swings for the first 0.25 s, touching down at step 5.
        let plan = gait
            .contact_horizon(&crate::model::PayloadSpec::none(), 0.0, c.dt, c.horizon)
            .unwrap();
        assert_eq!(plan.stance[4], [true, false]);
        assert_eq!(plan.stance[5], [false, true]);
        let reference = build_reference(&Command::default(), &state, &c, 0.55);
        let measured = level_frames(
            &[Vector3::new(0.0, 0.047, 0.0), Vector3::new(0.3, -0.2, 0.0)],
            0.0,
        );
        let feet = predict_foot_positions(
            &model,
            &state,
            &gait,
            &plan,
            &Command::default(),
            &reference,
            &measured,
            &[],
            0.0,
        );
        let td = feet[5][1].position;
        for k in 5..10 {
            assert_eq!(feet[k][1].position, td);
        }
        assert_relative_eq!(td, Vector3::new(0.0, -0.047, 0.0), epsilon = 1e-12);
        assert_eq!(feet[0][0].position, measured[0].position);
    }

    #[test]
    fn touchdown_uses_velocity_expected_at_that_step() {
        let model = RobotModel::default();
        let c = cfg();
        let gait = GaitSchedule::walking(0.5);
        let state = RobotState::at_height(0.55);
        let plan = gait
            .contact_horizon(&crate::model::PayloadSpec::none(), 0.0, c.dt, c.horizon)
            .unwrap();
        let reference = build_reference(&Command::default(), &state, &c, 0.55);
        let measured = level_frames(
            &[
                Vector3::new(0.0, 0.047, 0.0),
                Vector3::new(0.0, -0.047, 0.0),
            ],
            0.0,
        );
        let mut velocities = vec![Vector3::zeros(); c.horizon];
        velocities[5].y = -0.2;
        let feet = predict_foot_positions(
            &model,
            &state,
            &gait,
            &plan,
            &Command::default(),
            &reference,
            &measured,
            &velocities,
            0.0,
        );
        // Raibert: p = hip + v T/2 + k_c (v - v_cmd).
        let expected_y = -0.047 + (-0.2) * 0.25 / 2.0 + 0.03 * (-0.2);
        assert_relative_eq!(feet[5][1].position.y, expected_y, epsilon = 1e-12);
    }

    #[test]
    fn planned_velocities_shift_with_elapsed_time() {
        let previous: Vec<AugmentedState> = (0..4)
            .map(|j| {
                let mut x = AugmentedState::zeros();
                x[6] = j as f64 + 1.0;
                x
            })
            .collect();
        let measured = Vector3::new(-1.0, 0.0, 0.0);
        let v = planned_velocities(&previous, 0.01, 0.05, 6, &measured);
        let vx: Vec<f64> = v.iter().map(|v| v.x).collect();
        assert_eq!(vx, vec![-1.0, 1.0, 2.0, 3.0, 4.0, 4.0]);
        let v = planned_velocities(&previous, 0.05, 0.05, 3, &measured);
        assert_eq!(v[1].x, 2.0);
        assert!(planned_velocities(&[], 0.0, 0.05, 3, &measured)
            .iter()
            .all(|v| *v == measured));
    }
}
