use serde::{Deserialize, Serialize};

use super::scenario::Disturbance;
use super::TickRecord;

/// CoM error below which the robot counts as recovered from a push (m).
pub const RECOVERY_TOLERANCE: f64 = 0.02;
/// How long the error must stay inside the tolerance (s).
pub const RECOVERY_HOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    /// Simulated time actually covered (s).
    pub duration: f64,
    pub rmse_vx: f64,
    pub rmse_vy: f64,
    pub rmse_yaw_rate: f64,
    /// Time-averaged heading-frame velocities and yaw rate.
    pub mean_vx: f64,
    pub mean_vy: f64,
    pub mean_yaw_rate: f64,
    /// Net CoM displacement in the world x-y plane (m).
    pub distance: f64,
    /// Largest contact-constraint violation of an applied input.
    pub max_violation: f64,
    /// Largest normal force on either foot (N).
    pub max_normal_force: f64,
    /// Largest |τ| / limit over all joints and ticks.
    pub max_torque_ratio: f64,
    pub saturated_ticks: usize,
    pub fall: bool,
    pub fall_time: Option<f64>,
    pub solves: usize,
    pub solver_failures: usize,
    pub solve_ms_mean: f64,
    pub solve_ms_p95: f64,
    pub solve_ms_max: f64,
    /// Per disturbance: time after release until the CoM error stays below
    /// the recovery tolerance for the hold time, if it does.
    pub recovery_times: Vec<Option<f64>>,
    /// Largest CoM position error over the final second (m).
    pub final_com_error: f64,
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(sample: &[f64], p: f64) -> f64 {
    if sample.is_empty() {
        return 0.0;
    }
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

pub struct MetricInputs<'a> {
    pub records: &'a [TickRecord],
    pub disturbances: &'a [Disturbance],
    pub torque_limits: &'a [f64; 5],
    pub solve_ms: &'a [f64],
    pub solver_failures: usize,
    pub fall_time: Option<f64>,
}

pub fn compute_metrics(inputs: &MetricInputs<'_>) -> Metrics {
    let recs = inputs.records;
    let heading = |r: &TickRecord| {
        let (s, c) = r.state.euler.z.sin_cos();
        let v = r.state.velocity;
        (c * v.x + s * v.y, -s * v.x + c * v.y)
    };
    let end = recs.last().map(|r| r.t).unwrap_or(0.0);
    let start = recs.first().map(|r| r.t).unwrap_or(0.0);
    let distance = match (recs.first(), recs.last()) {
        (Some(a), Some(b)) => (b.state.position - a.state.position).xy().norm(),
        _ => 0.0,
    };
    let mut max_torque_ratio = 0.0f64;
    let mut max_normal_force = 0.0f64;
    for r in recs {
        for (j, tau) in r.torques.iter().enumerate() {
            max_torque_ratio = max_torque_ratio.max(tau.abs() / inputs.torque_limits[j % 5]);
        }
        max_normal_force = max_normal_force.max(r.u.0[2]).max(r.u.0[5]);
    }
    let recovery_times = inputs
        .disturbances
        .iter()
        .map(|d| recovery_time(recs, d.end()))
        .collect();
    Metrics {
        duration: end - start,
        rmse_vx: rms(recs.iter().map(|r| heading(r).0 - r.command.vx)),
        rmse_vy: rms(recs.iter().map(|r| heading(r).1 - r.command.vy)),
        rmse_yaw_rate: rms(recs
            .iter()
            .map(|r| r.state.angular_velocity.z - r.command.yaw_rate)),
        mean_vx: mean(recs.iter().map(|r| heading(r).0)),
        mean_vy: mean(recs.iter().map(|r| heading(r).1)),
        mean_yaw_rate: mean(recs.iter().map(|r| r.state.angular_velocity.z)),
        distance,
        max_violation: recs.iter().map(|r| r.violation).fold(0.0, f64::max),
        max_normal_force,
        max_torque_ratio,
        saturated_ticks: recs
            .iter()
            .filter(|r| r.saturated.iter().any(|s| *s))
            .count(),
        fall: inputs.fall_time.is_some(),
        fall_time: inputs.fall_time,
        solves: inputs.solve_ms.len(),
        solver_failures: inputs.solver_failures,
        solve_ms_mean: mean(inputs.solve_ms.iter().copied()),
        solve_ms_p95: percentile(inputs.solve_ms, 95.0),
        solve_ms_max: inputs.solve_ms.iter().copied().fold(0.0, f64::max),
        recovery_times,
        final_com_error: recs
            .iter()
            .filter(|r| r.t >= end - 1.0)
            .map(|r| r.com_error())
            .fold(0.0, f64::max),
    }
}

/// Time after `release` until the CoM error stays within tolerance for the
/// hold time.
pub fn recovery_time(records: &[TickRecord], release: f64) -> Option<f64> {
    let mut inside_since: Option<f64> = None;
    for r in records.iter().filter(|r| r.t >= release) {
        if r.com_error() < RECOVERY_TOLERANCE {
            let since = *inside_since.get_or_insert(r.t);
            if r.t - since >= RECOVERY_HOLD - 1e-9 {
                return Some(since - release);
            }
        } else {
            inside_since = None;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ControlInput, RobotState};
    use crate::mpc::Command;
    use nalgebra::Vector3;

    fn record(t: f64) -> TickRecord {
        TickRecord {
            t,
            state: RobotState::at_height(0.55),
            u: ControlInput::default(),
            torques: [0.0; 10],
            saturated: [false; 10],
            contact: [true; 2],
            foot_yaw: [0.0; 2],
            solve_ms: None,
            violation: 0.0,
            command: Command::default(),
            reference: Vector3::new(0.0, 0.0, 0.55),
            payload_mass: 0.0,
        }
    }

    fn metrics(recs: &[TickRecord]) -> Metrics {
        compute_metrics(&MetricInputs {
            records: recs,
            disturbances: &[],
            torque_limits: &[33.5, 33.5, 33.5, 51.9, 33.5],
            solve_ms: &[],
            solver_failures: 0,
            fall_time: None,
        })
    }

    #[test]
    fn perfect_tracking_has_zero_error() {
        let recs: Vec<_> = (0..100)
            .map(|i| {
                let mut r = record(i as f64 * 0.01);
                r.command = Command::new(0.6, 0.0, 0.0);
                r.state.velocity.x = 0.6;
                r
            })
            .collect();
        let m = metrics(&recs);
        assert_eq!((m.rmse_vx, m.rmse_vy, m.rmse_yaw_rate), (0.0, 0.0, 0.0));
    }

    #[test]
    fn sinusoidal_error_rms() {
        let a = 0.2;
        let n = 1000;
        let recs: Vec<_> = (0..n)
            .map(|i| {
                let mut r = record(i as f64 / n as f64);
                r.state.velocity.x = a * (2.0 * std::f64::consts::PI * i as f64 / n as f64).sin();
                r
            })
            .collect();
        let m = metrics(&recs);
        assert!((m.rmse_vx - a / 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn max_violation_is_reported() {
        let mut recs: Vec<_> = (0..10).map(|i| record(i as f64)).collect();
        recs[4].violation = 0.3;
        assert_eq!(metrics(&recs).max_violation, 0.3);
    }

    #[test]
    fn recovery_requires_hold() {
        let recs: Vec<_> = (0..400)
            .map(|i| {
                let t = i as f64 * 0.01;
                let mut r = record(t);
                // Error 5 cm until 1.5 s, a blip at 1.7 s, then settled.
                let err = if t < 1.5 || (1.69..1.71).contains(&t) {
                    0.05
                } else {
                    0.0
                };
                r.state.position.x = err;
                r
            })
            .collect();
        let rt = recovery_time(&recs, 1.0).unwrap();
        assert!((rt - 0.72).abs() < 0.011, "{rt}");
        assert_eq!(recovery_time(&recs[..200], 1.0), None);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 95.0), 95.0);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
    }
}
