//! Scenarios, batch runs and their metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::digest::Fnv1a;
use super::sim::Simulator;
use super::{EngineError, SimConfig};
use crate::analytics::{divide_layer_probability, ProbAssignment};
use crate::model::{PeerId, TaskId, TaskResult, Topology};
use crate::topology::{validate_topology, Violation};

pub const CSV_HEADER: [&str; 9] = [
    "scenario",
    "runs",
    "seed",
    "counterS",
    "counterF",
    "success_rate",
    "mean_task_time_s",
    "p95_task_time_s",
    "digest",
];

/// A topology, its probabilities and a simulation configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    pub topology: Topology,
    pub sim: SimConfig,
    pub probs: ProbAssignment,
}

/// Where a scenario file's topology comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum TopologySource {
    Inline(Box<Topology>),
    /// Relative paths resolve against the scenario file's directory.
    File(PathBuf),
}

/// How a scenario file assigns probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ProbSpec {
    /// Explicit per-peer values; peers not listed keep the topology's value.
    PerPeer(BTreeMap<PeerId, f64>),
    /// Every layer of a basic path gets the same share of this path probability.
    PerPath(f64),
}

/// On-disk scenario: `{"name", "topology", "sim", "probs"}`, where
/// `topology` is either an inline topology or `{"file": "<path>"}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFile {
    pub name: Option<String>,
    pub topology: TopologySource,
    pub sim: SimConfig,
    pub probs: Option<ProbSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(default)]
    name: Option<String>,
    topology: serde_json::Value,
    #[serde(default)]
    sim: SimConfig,
    #[serde(default)]
    probs: Option<ProbSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRef {
    file: PathBuf,
}

fn parse_err(path: &Path, source: serde_json::Error) -> EngineError {
    EngineError::Parse { path: path.display().to_string(), source }
}

fn read(path: &Path) -> Result<String, EngineError> {
    std::fs::read_to_string(path).map_err(|source| EngineError::Io { path: path.display().to_string(), source })
}

/// Reads a topology JSON file.
pub fn load_topology(path: &Path) -> Result<Topology, EngineError> {
    let mut t: Topology = serde_json::from_str(&read(path)?).map_err(|e| parse_err(path, e))?;
    t.normalize();
    Ok(t)
}

impl ScenarioFile {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, EngineError> {
        let raw: RawScenario = serde_json::from_str(text).map_err(|e| parse_err(origin, e))?;
        let topology = match &raw.topology {
            serde_json::Value::Object(map) if map.contains_key("file") => {
                let r: FileRef = serde_json::from_value(raw.topology.clone()).map_err(|e| parse_err(origin, e))?;
                TopologySource::File(r.file)
            }
            v => {
                let mut t: Topology = serde_json::from_value(v.clone())
                    .map_err(|e| EngineError::Config(format!("{}: topology: {e}", origin.display())))?;
                t.normalize();
                TopologySource::Inline(Box::new(t))
            }
        };
        Ok(ScenarioFile { name: raw.name, topology, sim: raw.sim, probs: raw.probs })
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        Self::parse(&read(path)?, path)
    }

    /// Resolves the topology and probabilities. `origin` is the scenario
    /// file's path, used for relative topology paths and the default name.
    pub fn resolve(self, origin: &Path) -> Result<Scenario, EngineError> {
        let topology = match self.topology {
            TopologySource::Inline(t) => *t,
            TopologySource::File(f) => {
                let f = if f.is_relative() { origin.parent().unwrap_or(Path::new(".")).join(f) } else { f };
                load_topology(&f)?
            }
        };
        let mut probs = ProbAssignment::from_topology(&topology);
        match self.probs {
            None => {}
            Some(ProbSpec::PerPeer(map)) => {
                for (peer, p) in map {
                    if !topology.contains(&peer) {
                        return Err(EngineError::Config(format!("probs: unknown peer {peer}")));
                    }
                    probs.set(peer, p)?;
                }
            }
            Some(ProbSpec::PerPath(path_prob)) => {
                let q = divide_layer_probability(path_prob, topology.max_layer().max(1))?;
                probs = ProbAssignment::uniform(&topology, q)?;
            }
        }
        let name = self.name.unwrap_or_else(|| {
            origin.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scenario".into())
        });
        Ok(Scenario { name, topology, sim: self.sim, probs })
    }
}

impl Scenario {
    pub fn new(name: impl Into<String>, topology: Topology, sim: SimConfig, probs: ProbAssignment) -> Self {
        Scenario { name: name.into(), topology, sim, probs }
    }

    /// Scenario using the probabilities configured on the topology.
    pub fn from_topology(name: impl Into<String>, topology: Topology, sim: SimConfig) -> Self {
        let probs = ProbAssignment::from_topology(&topology);
        Scenario::new(name, topology, sim, probs)
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        ScenarioFile::load(path)?.resolve(path)
    }

    /// Topology problems that prevent simulation. Path explosion is not one:
    /// the simulator never enumerates paths.
    pub fn check(&self) -> Result<(), EngineError> {
        self.sim.validate()?;
        let report = validate_topology(&self.topology);
        let blocking: Vec<String> = report
            .violations
            .iter()
            .filter(|v| !matches!(v, Violation::PathExplosion { .. }))
            .map(|v| v.to_string())
            .collect();
        if blocking.is_empty() {
            Ok(())
        } else {
            Err(EngineError::Config(blocking.join("; ")))
        }
    }
}

/// Aggregate outcome of a scenario's runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub scenario: String,
    pub runs: u32,
    pub seed: u64,
    #[serde(rename = "counterS")]
    pub counter_s: u64,
    #[serde(rename = "counterF")]
    pub counter_f: u64,
    pub success_rate: f64,
    /// Per run, in run order.
    pub task_times: Vec<f64>,
    pub mean_task_time: f64,
    pub p95_task_time: f64,
    pub event_trace_digest: u64,
    pub failure_reasons: BTreeMap<String, u64>,
    /// Mean time until the cache acknowledgment, cache mode only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_ack_time: Option<f64>,
}

struct RunSummary {
    success: bool,
    time: f64,
    digest: u64,
    reason: Option<String>,
    acked_at: Option<f64>,
}

/// Nearest-rank percentile of an unsorted sample; 0 for an empty one.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

impl Metrics {
    fn from_runs(name: &str, config: &SimConfig, runs: Vec<RunSummary>) -> Self {
        let mut digest = Fnv1a::new();
        let mut failure_reasons = BTreeMap::new();
        let mut counter_s = 0;
        let mut acks = Vec::new();
        for r in &runs {
            digest.write_u64(r.digest);
            if r.success {
                counter_s += 1;
            }
            if let Some(reason) = &r.reason {
                *failure_reasons.entry(reason.clone()).or_insert(0) += 1;
            }
            acks.extend(r.acked_at);
        }
        let task_times: Vec<f64> = runs.iter().map(|r| r.time).collect();
        let n = runs.len() as u64;
        Metrics {
            scenario: name.to_string(),
            runs: n as u32,
            seed: config.seed,
            counter_s,
            counter_f: n - counter_s,
            success_rate: counter_s as f64 / n.max(1) as f64,
            mean_task_time: task_times.iter().sum::<f64>() / n.max(1) as f64,
            p95_task_time: percentile(&task_times, 0.95),
            task_times,
            event_trace_digest: digest.finish(),
            failure_reasons,
            mean_ack_time: (!acks.is_empty()).then(|| acks.iter().sum::<f64>() / acks.len() as f64),
        }
    }

    /// Metrics for results produced outside the simulator, with a
    /// caller-supplied digest.
    pub fn from_results(name: &str, seed: u64, results: &[TaskResult], digest: u64) -> Self {
        let runs = results
            .iter()
            .map(|r| RunSummary {
                success: r.is_success(),
                time: r.completed_at,
                digest: 0,
                reason: r.reason.clone(),
                acked_at: None,
            })
            .collect();
        let config = SimConfig { seed, ..SimConfig::default() };
        Metrics { event_trace_digest: digest, ..Metrics::from_runs(name, &config, runs) }
    }

    /// Binomial standard error of `success_rate` around a true value `p`.
    pub fn binomial_sigma(p: f64, runs: u32) -> f64 {
        (p * (1.0 - p) / runs.max(1) as f64).sqrt()
    }

    pub fn digest_hex(&self) -> String {
        format!("{:016x}", self.event_trace_digest)
    }

    pub fn csv_record(&self) -> [String; 9] {
        [
            self.scenario.clone(),
            self.runs.to_string(),
            self.seed.to_string(),
            self.counter_s.to_string(),
            self.counter_f.to_string(),
            format!("{:.6}", self.success_rate),
            format!("{:.6}", self.mean_task_time),
            format!("{:.6}", self.p95_task_time),
            self.digest_hex(),
        ]
    }

    /// Header plus one row per metrics record.
    pub fn write_csv<W: Write>(rows: &[Metrics], out: W) -> Result<(), EngineError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for m in rows {
            w.write_record(m.csv_record())?;
        }
        w.flush().map_err(|source| EngineError::Io { path: "csv output".into(), source })?;
        Ok(())
    }

    pub fn to_csv_string(rows: &[Metrics]) -> Result<String, EngineError> {
        let mut buf = Vec::new();
        Self::write_csv(rows, &mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Runs `scenario.sim.runs` independent tasks; run `i` uses task id
/// `(i, 0)`. Topologies with a cache layer run in cache mode.
pub fn run_scenario(scenario: &Scenario) -> Result<Metrics, EngineError> {
    scenario.check()?;
    let make = || -> Result<Simulator, EngineError> {
        let sim = Simulator::new(&scenario.topology, &scenario.probs, &scenario.sim)?;
        match scenario.topology.cache_layer {
            Some(_) => sim.with_cache(&scenario.topology),
            None => Ok(sim),
        }
    };
    make()?;
    let runs: Vec<RunSummary> = (0..scenario.sim.runs as u64)
        .into_par_iter()
        .map_init(
            || make().expect("configuration checked above"),
            |sim, i| {
                let run = sim.run(TaskId::simulated(i, 0));
                RunSummary {
                    success: run.result.is_success(),
                    time: run.result.completed_at,
                    digest: run.digest,
                    reason: run.result.reason,
                    acked_at: run.acked_at,
                }
            },
        )
        .collect();
    Ok(Metrics::from_runs(&scenario.name, &scenario.sim, runs))
}
