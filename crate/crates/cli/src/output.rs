//! Trajectory CSV and run summary.

use std::io::Write;

use biped_mpc::sim::metrics::Metrics;
use biped_mpc::sim::{Scenario, SimLog, TickRecord};
use serde::Serialize;

/// Bumped whenever the CSV header or the summary layout changes.
pub const SCHEMA_VERSION: &str = "1";

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "-g", env!("BIPED_MPC_GIT_REV"));

const STATE_COLUMNS: [&str; 12] = [
    "x", "y", "z", "roll", "pitch", "yaw", "vx", "vy", "vz", "wx", "wy", "wz",
];

const INPUT_COLUMNS: [&str; 12] = [
    "f1x", "f1y", "f1z", "f2x", "f2y", "f2z", "m1x", "m1y", "m1z", "m2x", "m2y", "m2z",
];

const JOINTS: [&str; 5] = ["hip_yaw", "hip_roll", "thigh", "knee", "ankle"];

pub fn csv_header() -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend(STATE_COLUMNS.iter().map(|s| s.to_string()));
    h.extend(INPUT_COLUMNS.iter().map(|s| s.to_string()));
    for side in ["l", "r"] {
        h.extend(JOINTS.iter().map(|j| format!("tau_{side}_{j}")));
    }
    h.extend(["contact_l", "contact_r", "solver_ms", "violation"].map(String::from));
    h
}

/// Shortest decimal that parses back to the same bits, in exponent form for
/// very small or large magnitudes.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) || !v.is_finite() {
        v.to_string()
    } else {
        format!("{v:e}")
    }
}

fn row(r: &TickRecord) -> Vec<String> {
    let x = &r.state;
    let mut v = vec![fmt_f64(r.t)];
    for part in [&x.position, &x.euler, &x.velocity, &x.angular_velocity] {
        v.extend(part.iter().copied().map(fmt_f64));
    }
    v.extend(r.u.0.iter().copied().map(fmt_f64));
    v.extend(r.torques.iter().copied().map(fmt_f64));
    v.extend(r.contact.iter().map(|&c| u8::from(c).to_string()));
    v.push(r.solve_ms.map(fmt_f64).unwrap_or_default());
    v.push(fmt_f64(r.violation));
    v
}

pub fn write_trajectory(w: impl Write, log: &SimLog) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(csv_header())?;
    for r in &log.records {
        out.write_record(row(r))?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct Summary<'a> {
    pub schema_version: &'static str,
    pub version: &'static str,
    pub scenario: &'a str,
    pub fall: bool,
    pub rows: usize,
    pub first_solver_failure: Option<&'a str>,
    pub metrics: &'a Metrics,
    /// The scenario as run, after command-line overrides, as TOML text.
    pub config: String,
}

impl<'a> Summary<'a> {
    pub fn new(scenario: &'a Scenario, log: &'a SimLog) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            version: VERSION,
            scenario: &scenario.name,
            fall: log.metrics.fall,
            rows: log.records.len(),
            first_solver_failure: log.first_failure.as_deref(),
            metrics: &log.metrics,
            config: scenario.to_toml(),
        }
    }
}
