mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use biped_mpc::benchmark::{run_bench, BenchRow};
use biped_mpc::check::{run_checks, CheckOptions, Fault};
use biped_mpc::model::RobotModel;
use biped_mpc::mpc::Formulation;
use biped_mpc::sim::{run_scenario, Scenario};
use biped_mpc::Error;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use output::{write_trajectory, Summary, SCHEMA_VERSION, VERSION};

const EXIT_FAILURE: u8 = 1;
const EXIT_FALL: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser)]
#[command(name = "biped-mpc", version = VERSION, about = "Biped force-and-moment MPC simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write trajectory.csv and summary.json.
    Run(RunArgs),
    /// Time the condensed and non-condensed formulations.
    Bench(BenchArgs),
    /// Run the fast invariant suite.
    Check(CheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormulationArg {
    Condensed,
    Noncondensed,
}

impl From<FormulationArg> for Formulation {
    fn from(f: FormulationArg) -> Self {
        match f {
            FormulationArg::Condensed => Formulation::Condensed,
            FormulationArg::Noncondensed => Formulation::Noncondensed,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    None,
    FlipInputMap,
    ZeroFriction,
}

impl From<FaultArg> for Fault {
    fn from(f: FaultArg) -> Self {
        match f {
            FaultArg::None => Fault::None,
            FaultArg::FlipInputMap => Fault::FlipInputMap,
            FaultArg::ZeroFriction => Fault::ZeroFriction,
        }
    }
}

#[derive(clap::Args)]
struct RunArgs {
    /// Scenario file (TOML).
    scenario: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides both the simulation and the terrain seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mpc_formulation: Option<FormulationArg>,
    /// Overrides the simulated duration (s).
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    quiet: bool,
}

#[derive(clap::Args)]
struct BenchArgs {
    /// Horizon lengths to time.
    #[arg(long = "horizons", value_delimiter = ',', default_values_t = [5, 10, 20])]
    horizons: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    repetitions: usize,
    /// Directory for bench.json.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

#[derive(clap::Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances for the condensing comparison.
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Corrupt one ingredient to confirm the check catches it.
    #[arg(long, value_enum, default_value = "none")]
    fault: FaultArg,
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    // Usage errors share the config-error code; 2 is reserved for falls.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    let code = match cli.command {
        Command::Run(args) => run(&args),
        Command::Bench(args) => bench(&args),
        Command::Check(args) => check(&args),
    };
    ExitCode::from(code)
}

fn load_scenario(args: &RunArgs) -> Result<Scenario, String> {
    let text = fs::read_to_string(&args.scenario)
        .map_err(|e| format!("cannot read {}: {e}", args.scenario.display()))?;
    let mut s = Scenario::from_toml(&text).map_err(|e| describe(&args.scenario, &e))?;
    if let Some(seed) = args.seed {
        s.sim.seed = seed;
        s.terrain.seed = seed;
    }
    if let Some(f) = args.mpc_formulation {
        s.mpc.formulation = f.into();
    }
    if let Some(d) = args.duration {
        s.sim.duration = d;
    }
    s.validate().map_err(|e| describe(&args.scenario, &e))?;
    Ok(s)
}

fn describe(path: &Path, e: &Error) -> String {
    format!("{}: {e}", path.display())
}

fn run(args: &RunArgs) -> u8 {
    let scenario = match load_scenario(args) {
        Ok(s) => s,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_CONFIG;
        }
    };
    let log = match run_scenario(&scenario) {
        Ok(log) => log,
        Err(e) => {
            eprintln!("error: {}", describe(&args.scenario, &e));
            return EXIT_CONFIG;
        }
    };
    if let Err(msg) = write_run(&args.out, &scenario, &log) {
        eprintln!("error: {msg}");
        return EXIT_FAILURE;
    }
    let m = &log.metrics;
    if !args.quiet {
        println!("scenario        {}", scenario.name);
        println!(
            "simulated       {:.3} s ({} rows)",
            m.duration,
            log.records.len()
        );
        match m.fall_time {
            Some(t) => println!("fall            yes, at {t:.3} s"),
            None => println!("fall            no"),
        }
        println!("mean vx         {:.4} m/s", m.mean_vx);
        println!("mean yaw rate   {:.4} rad/s", m.mean_yaw_rate);
        println!("distance        {:.3} m", m.distance);
        println!("max violation   {:.3e}", m.max_violation);
        println!("max normal      {:.2} N", m.max_normal_force);
        println!("torque ratio    {:.3}", m.max_torque_ratio);
        println!(
            "solve time      mean {:.2} ms, p95 {:.2} ms ({} solves, {} failed)",
            m.solve_ms_mean, m.solve_ms_p95, m.solves, m.solver_failures
        );
        println!("output          {}", args.out.display());
    }
    if m.fall {
        EXIT_FALL
    } else {
        0
    }
}

fn write_run(out: &Path, scenario: &Scenario, log: &biped_mpc::sim::SimLog) -> Result<(), String> {
    fs::create_dir_all(out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
    let csv_path = out.join("trajectory.csv");
    let file = fs::File::create(&csv_path)
        .map_err(|e| format!("cannot write {}: {e}", csv_path.display()))?;
    write_trajectory(std::io::BufWriter::new(file), log)
        .map_err(|e| format!("cannot write {}: {e}", csv_path.display()))?;
    let summary = serde_json::to_string_pretty(&Summary::new(scenario, log))
        .map_err(|e| format!("cannot encode summary: {e}"))?;
    let json_path = out.join("summary.json");
    fs::write(&json_path, summary + "\n")
        .map_err(|e| format!("cannot write {}: {e}", json_path.display()))
}

#[derive(Serialize)]
struct BenchReport<'a> {
    schema_version: &'static str,
    version: &'static str,
    rows: &'a [BenchRow],
}

fn bench(args: &BenchArgs) -> u8 {
    if args.horizons.is_empty() || args.horizons.contains(&0) {
        eprintln!("error: horizons must be a nonempty list of positive integers");
        return EXIT_CONFIG;
    }
    let rows = match run_bench(&args.horizons, args.repetitions, &RobotModel::default()) {
        Ok(rows) => rows,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAILURE;
        }
    };
    if !args.quiet {
        println!(
            "{:>3}  {:<9} {:>14} {:>14} {:>14} {:>14} {:>7}",
            "h", "instance", "condensed ms", "p95", "noncond. ms", "p95", "ratio"
        );
        for r in &rows {
            println!(
                "{:>3}  {:<9} {:>14.3} {:>14.3} {:>14.3} {:>14.3} {:>7.2}",
                r.horizon,
                r.instance.name(),
                r.condensed_ms,
                r.condensed_p95_ms,
                r.noncondensed_ms,
                r.noncondensed_p95_ms,
                r.ratio
            );
        }
    }
    let report = BenchReport {
        schema_version: SCHEMA_VERSION,
        version: VERSION,
        rows: &rows,
    };
    let path = args.out.join("bench.json");
    let written = fs::create_dir_all(&args.out)
        .map_err(|e| e.to_string())
        .and_then(|_| serde_json::to_string_pretty(&report).map_err(|e| e.to_string()))
        .and_then(|text| fs::write(&path, text + "\n").map_err(|e| e.to_string()));
    if let Err(e) = written {
        eprintln!("error: cannot write {}: {e}", path.display());
        return EXIT_FAILURE;
    }
    0
}

fn check(args: &CheckArgs) -> u8 {
    let report = run_checks(&CheckOptions {
        condensing_instances: args.instances,
        seed: args.seed,
        fault: args.fault.into(),
        ..CheckOptions::default()
    });
    if !args.quiet {
        for item in &report.items {
            println!("{item}");
        }
    }
    match report.first_failure() {
        None => 0,
        Some(item) => {
            eprintln!("check failed: {}: {}", item.name, item.detail);
            EXIT_FAILURE
        }
    }
}
