//! Solve-time comparison of the condensed and non-condensed formulations.

use std::time::Instant;

use nalgebra::Vector3;
use serde::Serialize;

use crate::error::Result;
use crate::model::{GaitSchedule, PayloadSpec, RobotModel};
use crate::mpc::{
    build_reference, predict_foot_positions, solve_mpc, standing_inputs, Command, Formulation,
    MpcConfig, MpcInputs,
};
use crate::sim::metrics::percentile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Instance {
    Standing,
    Walking,
}

impl Instance {
    pub const ALL: [Instance; 2] = [Instance::Standing, Instance::Walking];

    pub fn name(self) -> &'static str {
        match self {
            Instance::Standing => "standing",
            Instance::Walking => "walking",
        }
    }
}

/// Fixed benchmark problem. Walking starts a quarter into the left stance
/// with a 0.6 m/s command, so the horizon contains touchdowns.
pub fn instance(kind: Instance, model: &RobotModel, cfg: &MpcConfig) -> MpcInputs {
    let mut inputs = standing_inputs(model, cfg, 0.0, Vector3::zeros());
    if kind == Instance::Walking {
        let gait = GaitSchedule::walking(0.5);
        let cmd = Command::new(0.6, 0.0, 0.0);
        inputs.state.velocity.x = 0.5;
        inputs.plan = gait
            .contact_horizon(&PayloadSpec::none(), 0.0625, cfg.dt, cfg.horizon)
            .expect("default gait is valid");
        inputs.reference = build_reference(&cmd, &inputs.state, cfg, model.nominal_height);
        let velocities = vec![inputs.state.velocity; cfg.horizon];
        inputs.feet = predict_foot_positions(
            model,
            &inputs.state,
            &gait,
            &inputs.plan,
            &cmd,
            &inputs.reference,
            &inputs.feet[0],
            &velocities,
            0.0,
        );
    }
    inputs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub horizon: usize,
    pub instance: Instance,
    /// Mean build-plus-solve wall time (ms).
    pub condensed_ms: f64,
    pub noncondensed_ms: f64,
    pub condensed_p95_ms: f64,
    pub noncondensed_p95_ms: f64,
    /// `noncondensed_ms / condensed_ms`.
    pub ratio: f64,
    pub repetitions: usize,
}

/// Mean and 95th percentile of the per-solve wall time (ms).
fn time_ms(
    inputs: &MpcInputs,
    model: &RobotModel,
    cfg: &MpcConfig,
    f: Formulation,
    reps: usize,
) -> Result<(f64, f64)> {
    // One untimed solve warms caches and surfaces solver errors.
    solve_mpc(inputs, model, cfg, f)?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        std::hint::black_box(solve_mpc(inputs, model, cfg, f)?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / reps as f64;
    Ok((mean, percentile(&times, 95.0)))
}

/// Times both formulations for every horizon and instance. Rows are ordered
/// by horizon, then instance.
pub fn run_bench(
    horizons: &[usize],
    repetitions: usize,
    model: &RobotModel,
) -> Result<Vec<BenchRow>> {
    let reps = repetitions.max(1);
    let mut rows = Vec::new();
    for &h in horizons {
        let cfg = MpcConfig {
            horizon: h,
            ..MpcConfig::default()
        };
        cfg.validate()?;
        for kind in Instance::ALL {
            let inputs = instance(kind, model, &cfg);
            let (condensed_ms, condensed_p95_ms) =
                time_ms(&inputs, model, &cfg, Formulation::Condensed, reps)?;
            let (noncondensed_ms, noncondensed_p95_ms) =
                time_ms(&inputs, model, &cfg, Formulation::Noncondensed, reps)?;
            rows.push(BenchRow {
                horizon: h,
                instance: kind,
                condensed_ms,
                noncondensed_ms,
                condensed_p95_ms,
                noncondensed_p95_ms,
                ratio: noncondensed_ms / condensed_ms,
                repetitions: reps,
            });
        }
    }
    Ok(rows)
}
