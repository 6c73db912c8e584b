//! `peerweave` command-line front end.

mod analyze;
mod error;
mod output;
mod reproduce;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use peerweave::analytics::{topology_success_probability, ProbAssignment};
use peerweave::catalog;
use peerweave::engine::{load_topology, run_scenario, Metrics, Scenario, ScenarioFile, SimConfig};
use peerweave::topology::{build_minimum_connection, validate_topology, MinConnectionParams, TopologyError, Violation};
use peerweave::transport::{live_run, LiveOptions};

use error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(
    name = "peerweave",
    version,
    about = "Reliability analysis, simulation and live runs of layered peer networks"
)]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Tasks per scenario.
    #[arg(long, global = true)]
    runs: Option<u32>,
    /// Output file, or directory for `reproduce`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "csv")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Paths, coupling, exact success probability and timing bounds of a topology.
    Analyze {
        topology: PathBuf,
        /// JSON object of peer id to success probability.
        #[arg(long)]
        probs: Option<PathBuf>,
    },
    /// Simulate a scenario file or a built-in scenario.
    Simulate {
        #[arg(required_unless_present = "scenario", conflicts_with = "scenario")]
        file: Option<PathBuf>,
        /// Built-in scenario name, or a scenario file path.
        #[arg(long)]
        scenario: Option<String>,
        /// Simulate even when the topology has too many paths for an exact value.
        #[arg(long)]
        allow_monte_carlo: bool,
    },
    /// Run the built-in experiment grid and compare against exact and reported values.
    Reproduce {
        #[arg(long, default_value = "reference")]
        suite: String,
    },
    /// Add the fewest full-connection edges that lift success probability above delta.
    MinConnection {
        topology: PathBuf,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        probs: Option<PathBuf>,
    },
    /// Run tasks through real peers on loopback sockets.
    Live {
        #[arg(required_unless_present = "scenario", conflicts_with = "scenario")]
        file: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<String>,
        /// First port; peers bind consecutive ports in id order. Omit for OS-assigned ports.
        #[arg(long)]
        ports: Option<u16>,
        /// Wall-clock seconds per configured second.
        #[arg(long, default_value_t = 0.01)]
        time_scale: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PEERWEAVE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("peerweave: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Analyze { topology, probs } => analyze::run(cli, topology, probs.as_deref()),
        Command::Simulate { file, scenario, allow_monte_carlo } => {
            simulate(cli, &resolve_scenario(cli, file.as_deref(), scenario.as_deref())?, *allow_monte_carlo)
        }
        Command::Reproduce { suite } => reproduce::run(cli, suite),
        Command::MinConnection { topology, delta, probs } => min_connection(cli, topology, *delta, probs.as_deref()),
        Command::Live { file, scenario, ports, time_scale } => {
            live(cli, &resolve_scenario(cli, file.as_deref(), scenario.as_deref())?, *ports, *time_scale)
        }
    }
}

/// A scenario from a file, or a catalog entry when `name` is not a path.
/// Bare topology files are accepted too and simulated with defaults.
fn resolve_scenario(cli: &Cli, file: Option<&Path>, name: Option<&str>) -> Result<Scenario, CliError> {
    let mut scenario = match (file, name) {
        (Some(path), _) => load_scenario_file(path)?,
        (None, Some(name)) if Path::new(name).is_file() => load_scenario_file(Path::new(name))?,
        (None, Some(name)) => {
            let entry = catalog::find(name).ok_or_else(|| CliError::Config(format!("unknown scenario {name:?}")))?;
            entry.scenario(SimConfig::default().runs, 0)?
        }
        (None, None) => return Err(CliError::Config("give a scenario file or --scenario".into())),
    };
    if let Some(seed) = cli.seed {
        scenario.sim.seed = seed;
    }
    if let Some(runs) = cli.runs {
        scenario.sim.runs = runs;
    }
    Ok(scenario)
}

fn load_scenario_file(path: &Path) -> Result<Scenario, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if value.get("peers").is_some() {
        let topology = load_topology(path)?;
        let name = path.file_stem().map_or("topology".into(), |s| s.to_string_lossy().into_owned());
        return Ok(Scenario::from_topology(name, topology, SimConfig::default()));
    }
    Ok(ScenarioFile::parse(&text, path)?.resolve(path)?)
}

fn explosion(topology: &peerweave::model::Topology) -> Option<usize> {
    validate_topology(topology).violations.iter().find_map(|v| match v {
        Violation::PathExplosion { cap } => Some(*cap),
        _ => None,
    })
}

fn simulate(cli: &Cli, scenario: &Scenario, allow_monte_carlo: bool) -> Result<(), CliError> {
    scenario.check()?;
    let exact = match explosion(&scenario.topology) {
        Some(cap) if !allow_monte_carlo => {
            return Err(CliError::Explosion(format!(
                "more than {cap} working paths; pass --allow-monte-carlo to simulate without an exact value"
            )))
        }
        Some(_) => None,
        None => topology_success_probability(&scenario.topology, &scenario.probs).ok(),
    };
    info!("simulating {} ({} runs, seed {})", scenario.name, scenario.sim.runs, scenario.sim.seed);
    let metrics = run_scenario(scenario)?;
    output::emit_metrics(cli, std::slice::from_ref(&metrics))?;
    if cli.out.is_some() {
        println!("{}", output::summary_table(std::slice::from_ref(&metrics), &[exact]));
    }
    Ok(())
}

fn read_probs(path: Option<&Path>, topology: &peerweave::model::Topology) -> Result<ProbAssignment, CliError> {
    let mut probs = ProbAssignment::from_topology(topology);
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let given: std::collections::BTreeMap<peerweave::model::PeerId, f64> =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for (peer, p) in given {
            if !topology.contains(&peer) {
                return Err(CliError::Config(format!("{}: unknown peer {peer}", path.display())));
            }
            probs.set(peer, p).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        }
    }
    Ok(probs)
}

fn load_valid_topology(path: &Path) -> Result<peerweave::model::Topology, CliError> {
    let topology = load_topology(path)?;
    let report = validate_topology(&topology);
    let blocking: Vec<String> = report
        .violations
        .iter()
        .filter(|v| !matches!(v, Violation::PathExplosion { .. }))
        .map(|v| v.to_string())
        .collect();
    if !blocking.is_empty() {
        return Err(CliError::Config(format!("{}: {}", path.display(), blocking.join("; "))));
    }
    if let Some(cap) = explosion(&topology) {
        return Err(CliError::Explosion(format!("{}: more than {cap} working paths", path.display())));
    }
    Ok(topology)
}

fn min_connection(cli: &Cli, path: &Path, delta: f64, probs: Option<&Path>) -> Result<(), CliError> {
    let skeleton = load_valid_topology(path)?;
    let probs = read_probs(probs, &skeleton)?;
    let params = MinConnectionParams::new(delta).map_err(|e| CliError::Config(e.to_string()))?;
    let result = match build_minimum_connection(&skeleton, &probs, params, &topology_success_probability) {
        Ok(r) => r,
        Err(e @ TopologyError::InfeasibleDelta { .. }) => return Err(CliError::Infeasible(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let json = serde_json::to_string_pretty(&result.topology).expect("topology serializes") + "\n";
    let certificate = format!(
        "certificate: probability={:.6} delta={} edges={} full_edges={} added={} full_probability={:.6}",
        result.probability,
        delta,
        result.topology.edges.len(),
        result.full_edge_count,
        result.added.len(),
        result.full_probability
    );
    match &cli.out {
        Some(out) => {
            output::write_file(out, json.as_bytes())?;
            println!("{certificate}");
        }
        None => {
            print!("{json}");
            eprintln!("{certificate}");
        }
    }
    Ok(())
}

fn live(cli: &Cli, scenario: &Scenario, ports: Option<u16>, time_scale: f64) -> Result<(), CliError> {
    scenario.check()?;
    if !(time_scale.is_finite() && time_scale > 0.0) {
        return Err(CliError::Config(format!("--time-scale must be > 0, got {time_scale}")));
    }
    let options = LiveOptions { base_port: ports, time_scale, ..LiveOptions::from_sim(&scenario.sim) };
    let (metrics, _) = live_run(&scenario.name, &scenario.topology, &scenario.probs, &scenario.sim, &options)?;
    output::emit_metrics(cli, std::slice::from_ref(&metrics))?;
    Ok(())
}

/// Rows for CSV output, shared by `simulate`, `live` and `reproduce`.
pub fn csv_string(rows: &[Metrics]) -> Result<String, CliError> {
    Ok(Metrics::to_csv_string(rows)?)
}
