use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use peerweave::analytics::{
    inclusion_exclusion_probability, max_wait_total, retry_time_bound, shared_peers, terminal_wait_with_cache,
    topology_success_probability, ProbAssignment, TimingAssignment, MAX_ENUMERATED_PEERS,
};
use peerweave::engine::load_topology;
use peerweave::model::{PeerId, Topology};
use peerweave::topology::{classify_paths, enumerate_working_paths, extract_basic_paths, validate_topology, PathKind};

use crate::error::CliError;
use crate::{output, read_probs, Cli, Format};

#[derive(Debug, Serialize)]
struct CoupledPair {
    a: usize,
    b: usize,
    common: Vec<PeerId>,
}

#[derive(Debug, Default, Serialize)]
struct Report {
    topology: String,
    peers: usize,
    layers: u32,
    edges: usize,
    violations: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    probabilities: Option<BTreeMap<PeerId, f64>>,
    working_paths: Vec<Vec<PeerId>>,
    basic_paths: Vec<Vec<PeerId>>,
    coupled_pairs: Vec<CoupledPair>,
    shared_peers: Vec<PeerId>,
    exact_probability: Option<f64>,
    method: Option<&'static str>,
    layer_timeouts_s: BTreeMap<u32, f64>,
    max_wait_total_s: Option<f64>,
    terminal_wait_with_cache_s: Option<f64>,
    retry_time_bound_s: Option<f64>,
}

fn exact(
    topology: &Topology,
    probs: &ProbAssignment,
    paths: &peerweave::topology::PathSet,
) -> (Option<f64>, Option<&'static str>) {
    if let Ok(p) = topology_success_probability(topology, probs) {
        let method =
            if topology.peers.len() <= MAX_ENUMERATED_PEERS { "state-enumeration" } else { "layered-frontier" };
        return (Some(p), Some(method));
    }
    match inclusion_exclusion_probability(paths, probs) {
        Ok(p) => (Some(p), Some("inclusion-exclusion")),
        Err(_) => (None, None),
    }
}

fn render_text(r: &Report) -> String {
    let mut s = format!("topology {}: {} peers, {} layers, {} edges\n", r.topology, r.peers, r.layers, r.edges);
    for v in &r.violations {
        s += &format!("violation: {v}\n");
    }
    let fmt_path = |p: &Vec<PeerId>| p.iter().map(|x| x.as_str()).collect::<Vec<_>>().join(" -> ");
    s += &format!("working paths: {}\n", r.working_paths.len());
    for p in &r.working_paths {
        s += &format!("  {}\n", fmt_path(p));
    }
    s += &format!("basic paths: {}\n", r.basic_paths.len());
    for p in &r.basic_paths {
        s += &format!("  {}\n", fmt_path(p));
    }
    s += &format!("coupled pairs: {}\n", r.coupled_pairs.len());
    if !r.shared_peers.is_empty() {
        s += &format!("shared peers: {}\n", r.shared_peers.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(", "));
    }
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
    s += &format!("exact success probability: {} ({})\n", opt(r.exact_probability), r.method.unwrap_or("unavailable"));
    s += &format!("max total wait: {} s\n", opt(r.max_wait_total_s));
    if r.terminal_wait_with_cache_s.is_some() {
        s += &format!("terminal wait with cache: {} s\n", opt(r.terminal_wait_with_cache_s));
    }
    s += &format!("retry time bound: {} s\n", opt(r.retry_time_bound_s));
    s
}

fn emit(cli: &Cli, report: &Report) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    if let Some(out) = &cli.out {
        output::write_file(out, json.as_bytes())?;
    }
    match cli.format {
        Format::Json => print!("{json}"),
        Format::Csv => print!("{}", render_text(report)),
    }
    Ok(())
}

pub fn run(cli: &Cli, path: &Path, probs_path: Option<&Path>) -> Result<(), CliError> {
    let topology = load_topology(path)?;
    let mut report = Report {
        topology: path.display().to_string(),
        peers: topology.peers.len(),
        layers: topology.max_layer(),
        edges: topology.edges.len(),
        layer_timeouts_s: topology.resolved_timeouts(),
        ..Report::default()
    };
    let validation = validate_topology(&topology);
    if !validation.is_valid() {
        report.violations = validation.violations.iter().map(|v| v.to_string()).collect();
        let exploded =
            validation.violations.iter().all(|v| matches!(v, peerweave::topology::Violation::PathExplosion { .. }));
        emit(cli, &report)?;
        let msg = format!("{}: {}", path.display(), report.violations.join("; "));
        return Err(if exploded { CliError::Explosion(msg) } else { CliError::Config(msg) });
    }
    let probs = read_probs(probs_path, &topology)?;
    if probs_path.is_some() {
        report.probabilities = Some(probs.iter().map(|(k, v)| (k.clone(), *v)).collect());
    }
    let paths = enumerate_working_paths(&topology)?;
    let all: Vec<_> = paths.iter().collect();
    for (i, a) in all.iter().enumerate() {
        for (j, b) in all.iter().enumerate().skip(i + 1) {
            let rel = classify_paths(a, b);
            if rel.kind == PathKind::Coupled {
                report.coupled_pairs.push(CoupledPair { a: i, b: j, common: rel.common.into_iter().collect() });
            }
        }
    }
    report.working_paths = paths.iter().map(|p| p.peers.clone()).collect();
    report.basic_paths = extract_basic_paths(&paths).iter().map(|p| p.peers.clone()).collect();
    report.shared_peers = shared_peers(&paths).into_iter().collect();
    (report.exact_probability, report.method) = exact(&topology, &probs, &paths);
    let timing = TimingAssignment::from_topology(&topology, &paths);
    report.max_wait_total_s = max_wait_total(&timing).ok();
    report.terminal_wait_with_cache_s = topology.cache_layer.and_then(|k| terminal_wait_with_cache(&timing, k).ok());
    report.retry_time_bound_s = retry_time_bound(&paths, &timing).ok();
    emit(cli, &report)
}
