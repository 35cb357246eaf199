use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::ExternalWrench;
use crate::error::{invalid, Error, Result};
use crate::model::{GaitSchedule, PayloadSpec, RobotModel};
use crate::mpc::{Command, MpcConfig};

use super::terrain::TerrainConfig;

/// Velocity setpoint; setpoints are linearly interpolated in time and the
/// last one is held.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommandPoint {
    pub t: f64,
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
}

/// External push on the body over `[start, start + duration)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Disturbance {
    pub start: f64,
    pub duration: f64,
    /// World-frame force (N).
    pub force: [f64; 3],
    /// World-frame torque (N·m).
    pub torque: [f64; 3],
    /// Application point in the body frame, relative to the CoM (m).
    pub point: [f64; 3],
}

impl Disturbance {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    pub fn active(&self, t: f64) -> bool {
        t >= self.start && t < self.end()
    }

    pub fn wrench(&self, rotation: &Matrix3<f64>) -> ExternalWrench {
        let force = Vector3::from(self.force);
        let arm = rotation * Vector3::from(self.point);
        ExternalWrench {
            force,
            torque: Vector3::from(self.torque) + arm.cross(&force),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub duration: f64,
    /// Physics and low-level control step (s).
    pub dt: f64,
    pub seed: u64,
    /// Standard deviation of additive Gaussian noise on the fed-back state;
    /// zero disables it.
    pub noise: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            duration: 3.0,
            dt: 0.001,
            seed: 0,
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub robot: RobotModel,
    pub gait: GaitSchedule,
    pub payload: PayloadSpec,
    pub terrain: TerrainConfig,
    pub mpc: MpcConfig,
    pub commands: Vec<CommandPoint>,
    pub disturbances: Vec<Disturbance>,
    pub sim: SimConfig,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text)
            .map_err(|e| Error::Parse(e.to_string().replace("unknown field", "unknown key")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.robot.validate()?;
        self.gait.validate()?;
        self.payload.validate()?;
        self.terrain.validate()?;
        self.mpc.validate()?;
        if !(self.sim.duration > 0.0) {
            return invalid("sim.duration must be > 0");
        }
        if !(self.sim.dt > 0.0 && self.sim.dt <= self.mpc.dt) {
            return invalid("sim.dt must be in (0, mpc.dt]");
        }
        if !(self.sim.noise >= 0.0) {
            return invalid("sim.noise must be >= 0");
        }
        let ticks = 1.0 / (self.mpc.frequency * self.sim.dt);
        if ticks < 1.0 - 1e-9 {
            return invalid("mpc.frequency exceeds the simulation rate");
        }
        for w in self.commands.windows(2) {
            if w[1].t < w[0].t {
                return invalid("command times must be nondecreasing");
            }
        }
        let mut windows: Vec<_> = self.disturbances.iter().collect();
        for d in &windows {
            if !(d.duration > 0.0) {
                return invalid("disturbance duration must be > 0");
            }
        }
        windows.sort_by(|a, b| a.start.total_cmp(&b.start));
        for w in windows.windows(2) {
            if w[1].start < w[0].end() {
                return invalid(format!(
                    "disturbances starting at {} s and {} s overlap",
                    w[0].start, w[1].start
                ));
            }
        }
        Ok(())
    }

    pub fn command_at(&self, t: f64) -> Command {
        command_at(&self.commands, t)
    }

    pub fn disturbance_at(&self, t: f64, rotation: &Matrix3<f64>) -> ExternalWrench {
        self.disturbances
            .iter()
            .find(|d| d.active(t))
            .map(|d| d.wrench(rotation))
            .unwrap_or_default()
    }

    /// Number of physics steps.
    pub fn ticks(&self) -> usize {
        (self.sim.duration / self.sim.dt).round() as usize
    }
}

pub fn command_at(points: &[CommandPoint], t: f64) -> Command {
    let Some(first) = points.first() else {
        return Command::default();
    };
    let as_cmd = |p: &CommandPoint| Command::new(p.vx, p.vy, p.yaw_rate);
    if t <= first.t {
        return as_cmd(first);
    }
    for w in points.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if t < b.t {
            let s = (t - a.t) / (b.t - a.t);
            return Command::new(
                a.vx + s * (b.vx - a.vx),
                a.vy + s * (b.vy - a.vy),
                a.yaw_rate + s * (b.yaw_rate - a.yaw_rate),
            );
        }
    }
    as_cmd(points.last().expect("nonempty"))
}
