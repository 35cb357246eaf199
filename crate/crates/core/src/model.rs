//! Robot parameters, payload description, and time-based gait scheduling.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Leg index. Leg 1 is the left leg, leg 2 the right leg.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Leg {
    Left = 0,
    Right = 1,
}

impl Leg {
    pub const BOTH: [Leg; 2] = [Leg::Left, Leg::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    /// +1 for the left leg, -1 for the right leg.
    pub fn side_sign(self) -> f64 {
        match self {
            Leg::Left => 1.0,
            Leg::Right => -1.0,
        }
    }
}

/// Physical and actuation parameters of the biped.
///
/// Defaults are the 16 kg, 0.85 m humanoid the controller was designed for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotModel {
    /// Single rigid body mass (kg).
    pub mass: f64,
    /// Body-frame principal moments of inertia (kg·m²).
    pub inertia: [f64; 3],
    /// Upper and lower leg link length (m).
    pub leg_length: f64,
    /// Foot length ahead of the contact point (m).
    pub toe_length: f64,
    /// Foot length behind the contact point (m).
    pub heel_length: f64,
    /// Left hip joint position relative to the CoM in the body frame (m).
    /// The right hip mirrors the lateral component.
    pub hip_offset: [f64; 3],
    /// Vertical distance from the ankle joint to the foot contact point (m).
    pub ankle_offset: f64,
    pub friction: f64,
    pub force_min: f64,
    pub force_max: f64,
    /// Peak torque per joint: hip yaw, hip roll, thigh, knee, ankle (N·m).
    pub torque_limits: [f64; 5],
    pub gravity: f64,
    /// Nominal CoM height above the stance feet (m).
    pub nominal_height: f64,
}

impl Default for RobotModel {
    fn default() -> Self {
        Self {
            mass: 16.0,
            inertia: [0.541, 0.520, 0.069],
            leg_length: 0.22,
            toe_length: 0.09,
            heel_length: 0.05,
            hip_offset: [0.0, 0.047, -0.13],
            ankle_offset: 0.04,
            friction: 0.5,
            force_min: 10.0,
            force_max: 250.0,
            torque_limits: [33.5, 33.5, 33.5, 51.9, 33.5],
            gravity: 9.81,
            nominal_height: 0.55,
        }
    }
}

impl RobotModel {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.mass,
            self.leg_length,
            self.toe_length,
            self.heel_length,
            self.ankle_offset,
            self.friction,
            self.force_min,
            self.force_max,
            self.gravity,
            self.nominal_height,
        ]
        .iter()
        .chain(self.inertia.iter())
        .chain(self.hip_offset.iter())
        .chain(self.torque_limits.iter())
        .all(|v| v.is_finite());
        if !finite {
            return invalid("robot parameters must be finite");
        }
        if self.mass <= 0.0 {
            return invalid(format!("robot.mass must be > 0 (got {})", self.mass));
        }
        if self.inertia.iter().any(|&i| i <= 0.0) {
            return invalid("robot.inertia entries must be > 0");
        }
        if !(self.force_min > 0.0 && self.force_min < self.force_max) {
            return invalid(format!(
                "vertical force bounds require 0 < force_min < force_max (got {} / {})",
                self.force_min, self.force_max
            ));
        }
        if !(self.friction > 0.0 && self.friction <= 1.5) {
            return invalid(format!(
                "friction pyramid: robot.friction must lie in (0, 1.5] (got {})",
                self.friction
            ));
        }
        if self.toe_length <= 0.0 || self.heel_length <= 0.0 {
            return invalid("line foot: toe_length and heel_length must be > 0");
        }
        if self.leg_length <= 0.0 || self.ankle_offset < 0.0 {
            return invalid("leg geometry must be positive");
        }
        if self.torque_limits.iter().any(|&t| t <= 0.0) {
            return invalid("torque limits must be positive");
        }
        if self.gravity <= 0.0 || self.nominal_height <= 0.0 {
            return invalid("gravity and nominal_height must be > 0");
        }
        Ok(())
    }

    pub fn inertia_diag(&self) -> Vector3<f64> {
        Vector3::from(self.inertia)
    }

    /// World-frame gravity acceleration, pointing down.
    pub fn gravity_vec(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -self.gravity)
    }

    /// Hip joint position relative to the CoM in the body frame.
    pub fn hip_in_body(&self, leg: Leg) -> Vector3<f64> {
        Vector3::new(
            self.hip_offset[0],
            leg.side_sign() * self.hip_offset[1],
            self.hip_offset[2],
        )
    }

    /// Effective friction coefficient of the inscribed pyramid, √2/2 · μ.
    pub fn pyramid_friction(&self) -> f64 {
        std::f64::consts::FRAC_1_SQRT_2 * self.friction
    }
}

/// Payload carried through the external force model: its weight and the
/// moment of that weight about the robot CoM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PayloadSpec {
    /// Piecewise-linear mass schedule as `(time s, mass kg)` breakpoints,
    /// held constant outside the breakpoint range. Two breakpoints with the
    /// same time give a step change.
    pub mass: Vec<[f64; 2]>,
    /// Payload CoM relative to the robot CoM, body frame (m).
    pub offset: [f64; 3],
    /// Time windows `[start, end)` during which the payload is held. When
    /// absent, the payload is held whenever its mass schedule is non-empty.
    pub contact: Option<Vec<[f64; 2]>>,
}

impl PayloadSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn constant(mass: f64, offset: [f64; 3]) -> Self {
        Self {
            mass: vec![[0.0, mass]],
            offset,
            contact: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.mass.windows(2) {
            if w[1][0] < w[0][0] {
                return invalid("payload.mass breakpoints must be sorted by time");
            }
        }
        if self
            .mass
            .iter()
            .any(|&[t, m]| !t.is_finite() || !m.is_finite() || m < 0.0)
        {
            return invalid("payload mass must be finite and >= 0");
        }
        if self.offset.iter().any(|v| !v.is_finite()) {
            return invalid("payload.offset must be finite");
        }
        if let Some(windows) = &self.contact {
            if windows.iter().any(|&[a, b]| !(a <= b)) {
                return invalid("payload.contact windows must satisfy start <= end");
            }
        }
        Ok(())
    }

    pub fn mass_at(&self, t: f64) -> f64 {
        let pts = &self.mass;
        match pts.iter().rposition(|p| p[0] <= t) {
            None => pts.first().map_or(0.0, |p| p[1]),
            Some(i) if i + 1 == pts.len() => pts[i][1],
            Some(i) => {
                let ([t0, m0], [t1, m1]) = (pts[i], pts[i + 1]);
                m0 + (m1 - m0) * (t - t0) / (t1 - t0)
            }
        }
    }

    pub fn in_contact(&self, t: f64) -> bool {
        match &self.contact {
            Some(windows) => windows.iter().any(|&[a, b]| t >= a && t < b),
            None => !self.mass.is_empty(),
        }
    }

    pub fn offset_body(&self) -> Vector3<f64> {
        Vector3::from(self.offset)
    }

    /// Mass actually loading the robot at `t` (σ_o · m_o).
    pub fn effective_mass(&self, t: f64) -> f64 {
        if self.in_contact(t) {
            self.mass_at(t)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GaitMode {
    #[default]
    Standing,
    Walking,
}

/// Periodic, purely time-based contact sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaitSchedule {
    pub mode: GaitMode,
    /// Gait period (s).
    pub period: f64,
    /// Per-leg phase offset as a fraction of the period.
    pub offsets: [f64; 2],
    /// Per-leg stance fraction.
    pub duty: [f64; 2],
    /// Allowed gait period range for [`GaitSchedule::validate`].
    pub period_bounds: [f64; 2],
    /// Velocity feedback gain of the touchdown heuristic (s).
    pub raibert_gain: f64,
    /// Swing-foot Cartesian PD gains.
    pub swing_kp: f64,
    pub swing_kd: f64,
    /// Swing apex clearance above the straight liftoff-target line (m).
    pub swing_apex: f64,
    /// Walking starts here (s); both feet stay down before it.
    pub start: f64,
}

impl Default for GaitSchedule {
    fn default() -> Self {
        Self {
            mode: GaitMode::Standing,
            period: 0.5,
            offsets: [0.0, 0.5],
            duty: [0.5, 0.5],
            period_bounds: [0.3, 0.7],
            raibert_gain: 0.03,
            swing_kp: 700.0,
            swing_kd: 20.0,
            swing_apex: 0.08,
            start: 0.0,
        }
    }
}

/// Instantaneous contact state of both legs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactState {
    pub stance: [bool; 2],
    /// Position within the current stance or swing segment, in [0, 1).
    pub phase: [f64; 2],
}

// Snap phase arithmetic so that exact segment boundaries are not lost to
// floating-point noise in `t / period`.
fn snap(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

impl GaitSchedule {
    pub fn standing() -> Self {
        Self::default()
    }

    pub fn walking(period: f64) -> Self {
        Self {
            mode: GaitMode::Walking,
            period,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.period > 0.0) {
            return invalid(format!("gait.period must be > 0 (got {})", self.period));
        }
        if self.mode == GaitMode::Walking {
            let [lo, hi] = self.period_bounds;
            if self.period < lo || self.period > hi {
                return invalid(format!(
                    "gait.period {} outside configured bounds [{lo}, {hi}]",
                    self.period
                ));
            }
            if self.duty.iter().any(|&d| !(d > 0.0 && d < 1.0)) {
                return invalid("gait.duty must lie in (0, 1) for walking");
            }
        }
        if !(self.start >= 0.0) {
            return invalid("gait.start must be >= 0");
        }
        if self.raibert_gain < 0.0 || self.swing_kp < 0.0 || self.swing_kd < 0.0 {
            return invalid("swing gains must be >= 0");
        }
        Ok(())
    }

    /// Stance/swing flags and segment phases at time `t`.
    pub fn contact_state(&self, t: f64) -> Result<ContactState> {
        if !(self.period > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gait.period must be > 0 (got {})",
                self.period
            )));
        }
        if self.mode == GaitMode::Standing || t < self.start {
            return Ok(ContactState {
                stance: [true, true],
                phase: [0.0, 0.0],
            });
        }
        let mut out = ContactState {
            stance: [false; 2],
            phase: [0.0; 2],
        };
        for leg in 0..2 {
            let cycle =
                snap(((t - self.start) / self.period + self.offsets[leg]).rem_euclid(1.0)) % 1.0;
            let duty = self.duty[leg];
            if cycle < duty {
                out.stance[leg] = true;
                out.phase[leg] = snap(cycle / duty) % 1.0;
            } else {
                out.phase[leg] = snap((cycle - duty) / (1.0 - duty)) % 1.0;
            }
        }
        Ok(out)
    }

    pub fn stance_duration(&self, leg: Leg) -> f64 {
        self.period * self.duty[leg.index()]
    }

    pub fn swing_duration(&self, leg: Leg) -> f64 {
        self.period * (1.0 - self.duty[leg.index()])
    }

    /// Time left in the segment (stance or swing) the leg occupies at `t`.
    pub fn segment_remaining(&self, leg: Leg, t: f64) -> Result<f64> {
        let cs = self.contact_state(t)?;
        let i = leg.index();
        if self.mode == GaitMode::Standing {
            return Ok(f64::INFINITY);
        }
        if t < self.start {
            return Ok(self.start - t);
        }
        let seg = if cs.stance[i] {
            self.stance_duration(leg)
        } else {
            self.swing_duration(leg)
        };
        Ok((1.0 - cs.phase[i]) * seg)
    }

    /// Contact table over an MPC horizon starting at `t0`.
    pub fn contact_horizon(
        &self,
        payload: &PayloadSpec,
        t0: f64,
        dt: f64,
        horizon: usize,
    ) -> Result<ContactPlan> {
        if horizon == 0 {
            return invalid("horizon must be >= 1");
        }
        if !(dt > 0.0) {
            return invalid(format!("MPC step must be > 0 (got {dt})"));
        }
        let mut stance = Vec::with_capacity(horizon);
        let mut phase = Vec::with_capacity(horizon);
        let mut payload_contact = Vec::with_capacity(horizon);
        let mut payload_mass = Vec::with_capacity(horizon);
        for k in 0..horizon {
            let t = t0 + k as f64 * dt;
            let cs = self.contact_state(t)?;
            stance.push(cs.stance);
            phase.push(cs.phase);
            payload_contact.push(payload.in_contact(t));
            payload_mass.push(payload.mass_at(t));
        }
        Ok(ContactPlan {
            t0,
            dt,
            stance,
            phase,
            payload_contact,
            payload_mass,
        })
    }
}

/// Per-step contact table over the prediction horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactPlan {
    pub t0: f64,
    pub dt: f64,
    pub stance: Vec<[bool; 2]>,
    pub phase: Vec<[f64; 2]>,
    pub payload_contact: Vec<bool>,
    pub payload_mass: Vec<f64>,
}

impl ContactPlan {
    /// All-stance plan without payload, mostly for tests and benchmarks.
    pub fn all_stance(horizon: usize, dt: f64) -> Self {
        Self {
            t0: 0.0,
            dt,
            stance: vec![[true, true]; horizon],
            phase: vec![[0.0, 0.0]; horizon],
            payload_contact: vec![false; horizon],
            payload_mass: vec![0.0; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.stance.len()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }
}
