//! Building, validating and analysing layered peer topologies.
//!
//! All orderings are lexicographic by [`PeerId`] so every result here is
//! reproducible.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{AnalyticsError, ProbAssignment};
use crate::model::{Edge, LayerKind, PeerId, PeerSpec, Role, Topology};

/// Default cap on enumerated working paths.
pub const DEFAULT_PATH_CAP: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("unknown layer {0}")]
    UnknownLayer(u32),
    #[error("unknown peer {0}")]
    UnknownPeer(PeerId),
    #[error("more than {cap} working paths")]
    PathExplosion { cap: usize },
    #[error("no upstream peer can retry after {0} fails")]
    NoDecisionPoint(PeerId),
    #[error("every alternative to {0} has already been tried")]
    NoAlternative(PeerId),
    #[error("delta {delta} is out of range [0, 1)")]
    InvalidDelta { delta: f64 },
    #[error("full connection only reaches {full:.6}, not above delta {delta}")]
    InfeasibleDelta { delta: f64, full: f64 },
    #[error("edge cap of {cap} reached at probability {reached:.6}")]
    EdgeCapReached { cap: usize, reached: f64 },
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

/// Peers from a terminal entry point to a final-layer peer.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WorkingPath {
    pub peers: Vec<PeerId>,
}

impl WorkingPath {
    pub fn new(peers: Vec<PeerId>) -> Self {
        WorkingPath { peers }
    }

    pub fn len(&self) -> usize {
        self.peers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peers.is_empty()
    }

    pub fn contains(&self, peer: &PeerId) -> bool {
        self.peers.contains(peer)
    }
}

impl fmt::Display for WorkingPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.peers.iter().map(PeerId::as_str).collect();
        f.write_str(&names.join(" -> "))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PathSet {
    pub paths: Vec<WorkingPath>,
}

impl PathSet {
    pub fn new(paths: Vec<WorkingPath>) -> Self {
        PathSet { paths }
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &WorkingPath> {
        self.paths.iter()
    }

    /// Distinct peers across all paths, sorted.
    pub fn peers(&self) -> BTreeSet<&PeerId> {
        self.paths.iter().flat_map(|p| p.peers.iter()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Separate,
    Coupled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathRelation {
    pub kind: PathKind,
    pub common: BTreeSet<PeerId>,
}

/// The failover route taken when a peer fails: `back` walks from the failed
/// peer up to the peer that can retry, `forward` is the replacement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchPath {
    pub back: Vec<PeerId>,
    pub forward: Vec<PeerId>,
    pub len_back: usize,
    pub len_forward: usize,
    pub len_switch: usize,
}

impl SwitchPath {
    pub fn new(back: Vec<PeerId>, forward: Vec<PeerId>) -> Self {
        let len_back = back.len();
        let len_forward = forward.len();
        SwitchPath { back, forward, len_back, len_forward, len_switch: len_back + len_forward }
    }

    /// The peer that makes the retry decision.
    pub fn decision_point(&self) -> Option<&PeerId> {
        self.back.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinConnectionParams {
    pub delta: f64,
    pub max_edges: Option<usize>,
}

impl MinConnectionParams {
    pub fn new(delta: f64) -> Result<Self, TopologyError> {
        if !(0.0..1.0).contains(&delta) {
            return Err(TopologyError::InvalidDelta { delta });
        }
        Ok(MinConnectionParams { delta, max_edges: None })
    }
}

/// Result of minimum-connection synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct MinConnection {
    pub topology: Topology,
    pub probability: f64,
    /// Edges added to the skeleton, in the order they were chosen.
    pub added: Vec<Edge>,
    pub full_probability: f64,
    pub full_edge_count: usize,
}

fn peer_name(prefix: char, path: usize, layer: u32, path_width: usize, layer_width: usize) -> PeerId {
    PeerId::new(format!("{prefix}{path:0path_width$}l{layer:0layer_width$}")).expect("generated ids are valid")
}

fn digits(n: usize) -> usize {
    n.to_string().len()
}

/// `num_paths` disjoint chains of `depth` peers; `prob(path, layer)` gives
/// each peer's success probability (`path` is 1-based).
pub fn build_separate_paths(
    num_paths: usize,
    depth: u32,
    prob: impl Fn(usize, u32) -> f64,
) -> Result<Topology, TopologyError> {
    if num_paths == 0 || depth == 0 {
        return Err(TopologyError::InvalidDimension(format!(
            "need at least one path and one layer, got {num_paths} x {depth}"
        )));
    }
    let (pw, lw) = (digits(num_paths), digits(depth as usize));
    let mut peers = Vec::new();
    let mut edges = Vec::new();
    let mut entries = Vec::new();
    for path in 1..=num_paths {
        for layer in 1..=depth {
            let id = peer_name('p', path, layer, pw, lw);
            peers.push(PeerSpec::worker(id.clone(), layer, prob(path, layer)));
            if layer == 1 {
                entries.push(id);
            } else {
                edges.push(Edge::new(peer_name('p', path, layer - 1, pw, lw), id));
            }
        }
    }
    let mut topo = Topology {
        peers,
        edges,
        terminal_targets: entries,
        alignments: Vec::new(),
        layer_timeouts: BTreeMap::new(),
        cache_layer: None,
    };
    topo.normalize();
    Ok(topo)
}

/// Two chains of `depth` peers that share their first `common` layers.
pub fn build_coupled_pair(depth: u32, common: u32, prob: f64) -> Result<Topology, TopologyError> {
    if depth == 0 || common >= depth {
        return Err(TopologyError::InvalidDimension(format!(
            "common prefix {common} must be shorter than depth {depth}"
        )));
    }
    let lw = digits(depth as usize);
    let name = |path: usize, layer: u32| {
        if layer <= common {
            peer_name('c', 0, layer, 1, lw)
        } else {
            peer_name('p', path, layer, 1, lw)
        }
    };
    let mut peers = BTreeMap::new();
    let mut edges = Vec::new();
    for path in 1..=2 {
        for layer in 1..=depth {
            let id = name(path, layer);
            peers.entry(id.clone()).or_insert_with(|| PeerSpec::worker(id.clone(), layer, prob));
            if layer > 1 {
                edges.push(Edge::new(name(path, layer - 1), id));
            }
        }
    }
    let mut topo = Topology {
        terminal_targets: peers.values().filter(|p| p.layer == 1).map(|p| p.id.clone()).collect(),
        peers: peers.into_values().collect(),
        edges,
        alignments: Vec::new(),
        layer_timeouts: BTreeMap::new(),
        cache_layer: None,
    };
    topo.normalize();
    Ok(topo)
}

/// Connects every peer of layer `L - 1` to every peer of layer `L` for each
/// listed `L`. Listing layer 1 makes every layer-1 peer a terminal target.
pub fn make_full_connection(topology: &Topology, layers: &[u32]) -> Result<Topology, TopologyError> {
    let max = topology.max_layer();
    let mut out = topology.clone();
    for &layer in layers {
        if layer == 0 || layer > max {
            return Err(TopologyError::UnknownLayer(layer));
        }
        if layer == 1 {
            out.terminal_targets = topology.peers_in_layer(1).into_iter().cloned().collect();
            continue;
        }
        let sources = topology.peers_in_layer(layer - 1);
        let targets = topology.peers_in_layer(layer);
        for s in &sources {
            for t in &targets {
                out.edges.push(Edge::new((*s).clone(), (*t).clone()));
            }
        }
    }
    out.normalize();
    Ok(out)
}

/// Full connection over every layer.
pub fn full_closure(topology: &Topology) -> Result<Topology, TopologyError> {
    let layers: Vec<u32> = (1..=topology.max_layer()).collect();
    make_full_connection(topology, &layers)
}

/// Dense index of a topology, with peers numbered in lexicographic order.
#[derive(Debug, Clone)]
pub struct CompiledTopology {
    pub ids: Vec<PeerId>,
    pub index: HashMap<PeerId, usize>,
    pub layer: Vec<u32>,
    pub targets: Vec<Vec<usize>>,
    pub entries: Vec<usize>,
    pub is_final: Vec<bool>,
    pub processing_time: Vec<f64>,
    /// Timeout applied when a peer is the target of a request.
    pub timeout: Vec<f64>,
    pub max_layer: u32,
}

impl CompiledTopology {
    pub fn new(topology: &Topology) -> Result<Self, TopologyError> {
        let mut specs: Vec<&PeerSpec> = topology.peers.iter().collect();
        specs.sort_by(|a, b| a.id.cmp(&b.id));
        let ids: Vec<PeerId> = specs.iter().map(|p| p.id.clone()).collect();
        let index: HashMap<PeerId, usize> = ids.iter().cloned().enumerate().map(|(i, id)| (id, i)).collect();
        let lookup = |id: &PeerId| index.get(id).copied().ok_or_else(|| TopologyError::UnknownPeer(id.clone()));
        let mut targets = vec![Vec::new(); ids.len()];
        for e in &topology.edges {
            targets[lookup(&e.source)?].push(lookup(&e.target)?);
        }
        for t in &mut targets {
            t.sort_unstable();
            t.dedup();
        }
        let mut entries = topology.terminal_targets.iter().map(lookup).collect::<Result<Vec<_>, _>>()?;
        entries.sort_unstable();
        entries.dedup();
        let max_layer = topology.max_layer();
        let layer: Vec<u32> = specs.iter().map(|p| p.layer).collect();
        let is_final = (0..ids.len()).map(|i| layer[i] == max_layer && targets[i].is_empty()).collect();
        let timeouts = topology.resolved_timeouts();
        Ok(CompiledTopology {
            timeout: layer.iter().map(|l| timeouts.get(l).copied().unwrap_or(0.0)).collect(),
            processing_time: specs.iter().map(|p| p.processing_time).collect(),
            ids,
            index,
            layer,
            targets,
            entries,
            is_final,
            max_layer,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Every terminal-to-final path, in lexicographic order.
pub fn enumerate_working_paths(topology: &Topology) -> Result<PathSet, TopologyError> {
    enumerate_working_paths_capped(topology, DEFAULT_PATH_CAP)
}

pub fn enumerate_working_paths_capped(topology: &Topology, cap: usize) -> Result<PathSet, TopologyError> {
    let compiled = CompiledTopology::new(topology)?;
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for &entry in &compiled.entries {
        walk(&compiled, entry, &mut stack, &mut out, cap)?;
    }
    Ok(PathSet::new(
        out.into_iter()
            .map(|idx: Vec<usize>| WorkingPath::new(idx.into_iter().map(|i| compiled.ids[i].clone()).collect()))
            .collect(),
    ))
}

fn walk(
    c: &CompiledTopology,
    node: usize,
    stack: &mut Vec<usize>,
    out: &mut Vec<Vec<usize>>,
    cap: usize,
) -> Result<(), TopologyError> {
    if stack.contains(&node) {
        return Ok(());
    }
    stack.push(node);
    if c.is_final[node] {
        if out.len() >= cap {
            return Err(TopologyError::PathExplosion { cap });
        }
        out.push(stack.clone());
    } else {
        for &next in &c.targets[node] {
            walk(c, next, stack, out, cap)?;
        }
    }
    stack.pop();
    Ok(())
}

pub fn classify_paths(a: &WorkingPath, b: &WorkingPath) -> PathRelation {
    let left: BTreeSet<_> = a.peers.iter().collect();
    let common: BTreeSet<PeerId> = b.peers.iter().filter(|p| left.contains(p)).cloned().collect();
    let kind = if common.is_empty() { PathKind::Separate } else { PathKind::Coupled };
    PathRelation { kind, common }
}

/// A largest set of pairwise separate paths. Among equally large sets the
/// one whose path indices are lexicographically smallest wins.
pub fn extract_basic_paths(paths: &PathSet) -> PathSet {
    let mut sorted = paths.paths.clone();
    sorted.sort();
    sorted.dedup();
    let sets: Vec<BTreeSet<&PeerId>> = sorted.iter().map(|p| p.peers.iter().collect()).collect();
    let disjoint = |i: usize, j: usize| sets[i].is_disjoint(&sets[j]);

    struct Search<'a, F: Fn(usize, usize) -> bool> {
        sorted: &'a [WorkingPath],
        disjoint: F,
        best: Vec<usize>,
    }

    impl<F: Fn(usize, usize) -> bool> Search<'_, F> {
        // Every path in a packing has its own first peer and its own last peer.
        fn bound(&self, candidates: &[usize]) -> usize {
            let firsts: BTreeSet<_> = candidates.iter().map(|&i| self.sorted[i].peers.first()).collect();
            let lasts: BTreeSet<_> = candidates.iter().map(|&i| self.sorted[i].peers.last()).collect();
            firsts.len().min(lasts.len())
        }

        fn run(&mut self, chosen: &mut Vec<usize>, candidates: &[usize]) {
            if chosen.len() > self.best.len() {
                self.best = chosen.clone();
            }
            let bound = chosen.len() + self.bound(candidates);
            if bound <= self.best.len() {
                return;
            }
            for (pos, &c) in candidates.iter().enumerate() {
                if self.best.len() >= bound || chosen.len() + candidates.len() - pos <= self.best.len() {
                    return;
                }
                let rest: Vec<usize> =
                    candidates[pos + 1..].iter().copied().filter(|&o| (self.disjoint)(c, o)).collect();
                chosen.push(c);
                self.run(chosen, &rest);
                chosen.pop();
            }
        }
    }

    let mut search = Search { sorted: &sorted, disjoint, best: Vec::new() };
    let all: Vec<usize> = (0..sorted.len()).collect();
    search.run(&mut Vec::new(), &all);
    PathSet::new(search.best.iter().map(|&i| sorted[i].clone()).collect())
}

/// Failover route when `failed` stops answering.
///
/// `context` lists the peers the task has already passed through, ending
/// with the peer that detected the failure. Switching always replaces a whole
/// alignment segment; peers outside any alignment act as single-peer
/// segments of a normal layer. The switch length is therefore
/// `|failed segment| + 1 + |replacement segment|`.
pub fn compute_switch_path(
    topology: &Topology,
    failed: &PeerId,
    context: &[PeerId],
    tried: &BTreeSet<PeerId>,
) -> Result<SwitchPath, TopologyError> {
    let failed_layer = topology.layer_of(failed).ok_or_else(|| TopologyError::UnknownPeer(failed.clone()))?;
    let alignment = topology.alignment_for(failed);
    let failed_segment: Vec<PeerId> = match alignment.and_then(|a| a.segment_of(failed)) {
        Some((_, seg)) => seg.to_vec(),
        None => vec![failed.clone()],
    };
    let start = &failed_segment[0];
    let decision = match context.iter().position(|p| p == start) {
        Some(0) => None,
        Some(i) => Some(&context[i - 1]),
        None if start == failed => context.last(),
        None => None,
    }
    .filter(|d| topology.has_edge(d, start))
    .ok_or_else(|| TopologyError::NoDecisionPoint(failed.clone()))?;

    let usable = |seg: &[PeerId]| {
        !seg.contains(failed) && topology.has_edge(decision, &seg[0]) && seg.iter().all(|p| !tried.contains(p))
    };
    let replacement: Option<Vec<PeerId>> = match alignment {
        Some(a) => {
            let mut options: Vec<&Vec<PeerId>> = a.segments.values().filter(|s| !s.is_empty() && usable(s)).collect();
            options.sort();
            options.first().map(|s| (*s).clone())
        }
        None => topology
            .targets_of(decision)
            .into_iter()
            .filter(|t| topology.layer_of(t) == Some(failed_layer) && usable(std::slice::from_ref(*t)))
            .map(|t| vec![t.clone()])
            .next(),
    };
    let forward = replacement.ok_or_else(|| TopologyError::NoAlternative(failed.clone()))?;
    let mut back: Vec<PeerId> = failed_segment.into_iter().rev().collect();
    back.push(decision.clone());
    Ok(SwitchPath::new(back, forward))
}

/// One problem found by [`validate_topology`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    DuplicatePeer { peer: PeerId },
    InvalidProbability { peer: PeerId, value: f64 },
    InvalidProcessingTime { peer: PeerId, value: f64 },
    InvalidLayer { peer: PeerId },
    UnknownEdgePeer { peer: PeerId },
    UnknownTerminalTarget { peer: PeerId },
    EntryNotInFirstLayer { peer: PeerId },
    LayerSkip { source: PeerId, target: PeerId },
    DeadEnd { peer: PeerId },
    NotOnWorkingPath { peer: PeerId },
    NoWorkingPath,
    PathExplosion { cap: usize },
    BadAlignment { logical_layer: u32, reason: String },
    CacheRoleOutsideCacheLayer { peer: PeerId },
    CacheLayerOutOfRange { cache_layer: u32, layers: u32 },
    InvalidTimeout { layer: u32, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            DuplicatePeer { peer } => write!(f, "peers: duplicate id {peer}"),
            InvalidProbability { peer, value } => write!(f, "peers: {peer} success_prob {value} outside [0, 1]"),
            InvalidProcessingTime { peer, value } => write!(f, "peers: {peer} processing_time {value} must be > 0"),
            InvalidLayer { peer } => write!(f, "peers: {peer} layer must be >= 1"),
            UnknownEdgePeer { peer } => write!(f, "edges: unknown peer {peer}"),
            UnknownTerminalTarget { peer } => write!(f, "terminal_targets: unknown peer {peer}"),
            EntryNotInFirstLayer { peer } => write!(f, "terminal_targets: {peer} is not in layer 1"),
            LayerSkip { source, target } => write!(f, "edges: {source} -> {target} does not go to the next layer"),
            DeadEnd { peer } => write!(f, "edges: {peer} has no target below the final layer"),
            NotOnWorkingPath { peer } => write!(f, "peers: {peer} is not on any working path"),
            NoWorkingPath => write!(f, "topology has no working path"),
            PathExplosion { cap } => write!(f, "more than {cap} working paths; path checks skipped"),
            BadAlignment { logical_layer, reason } => write!(f, "alignments: layer {logical_layer}: {reason}"),
            CacheRoleOutsideCacheLayer { peer } => write!(f, "peers: cache peer {peer} outside cache_layer"),
            CacheLayerOutOfRange { cache_layer, layers } => {
                write!(f, "cache_layer: {cache_layer} must be in [1, {layers})")
            }
            InvalidTimeout { layer, value } => write!(f, "layer_timeouts: layer {layer} has timeout {value}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

pub fn validate_topology(topology: &Topology) -> ValidationReport {
    let mut violations = Vec::new();
    let mut seen = BTreeSet::new();
    for p in &topology.peers {
        if !seen.insert(&p.id) {
            violations.push(Violation::DuplicatePeer { peer: p.id.clone() });
        }
        if !(0.0..=1.0).contains(&p.success_prob) {
            violations.push(Violation::InvalidProbability { peer: p.id.clone(), value: p.success_prob });
        }
        if p.processing_time.is_nan() || p.processing_time <= 0.0 {
            violations.push(Violation::InvalidProcessingTime { peer: p.id.clone(), value: p.processing_time });
        }
        if p.layer == 0 {
            violations.push(Violation::InvalidLayer { peer: p.id.clone() });
        }
        if p.role == Role::Cache && topology.cache_layer != Some(p.layer) {
            violations.push(Violation::CacheRoleOutsideCacheLayer { peer: p.id.clone() });
        }
    }
    let max = topology.max_layer();
    if let Some(k) = topology.cache_layer {
        if k == 0 || k >= max {
            violations.push(Violation::CacheLayerOutOfRange { cache_layer: k, layers: max });
        }
    }
    for (&layer, &value) in &topology.layer_timeouts {
        if value.is_nan() || value < 0.0 {
            violations.push(Violation::InvalidTimeout { layer, value });
        }
    }
    for t in &topology.terminal_targets {
        match topology.layer_of(t) {
            None => violations.push(Violation::UnknownTerminalTarget { peer: t.clone() }),
            Some(l) if l != 1 => violations.push(Violation::EntryNotInFirstLayer { peer: t.clone() }),
            _ => {}
        }
    }
    let mut unknown = BTreeSet::new();
    for e in &topology.edges {
        for end in [&e.source, &e.target] {
            if !topology.contains(end) && unknown.insert(end.clone()) {
                violations.push(Violation::UnknownEdgePeer { peer: end.clone() });
            }
        }
    }
    for a in &topology.alignments {
        if let Some(reason) = a.shape_violation() {
            violations.push(Violation::BadAlignment { logical_layer: a.logical_layer, reason });
        }
        for p in a.segments.values().flatten() {
            if topology.layer_of(p) != Some(a.logical_layer) {
                violations.push(Violation::BadAlignment {
                    logical_layer: a.logical_layer,
                    reason: format!("{p} is not a peer of this layer"),
                });
            }
        }
    }
    if !unknown.is_empty() {
        return ValidationReport { violations };
    }

    let chained = |s: &PeerId, t: &PeerId| {
        topology
            .alignments
            .iter()
            .flat_map(|a| a.segments.values())
            .any(|seg| seg.windows(2).any(|w| &w[0] == s && &w[1] == t))
    };
    for e in &topology.edges {
        let (ls, lt) = (topology.layer_of(&e.source).unwrap(), topology.layer_of(&e.target).unwrap());
        if !(lt == ls + 1 || (lt == ls && chained(&e.source, &e.target))) {
            violations.push(Violation::LayerSkip { source: e.source.clone(), target: e.target.clone() });
        }
    }
    let mut by_id: Vec<&PeerSpec> = topology.peers.iter().collect();
    by_id.sort_by(|a, b| a.id.cmp(&b.id));
    for p in &by_id {
        if p.layer < max && topology.targets_of(&p.id).is_empty() {
            violations.push(Violation::DeadEnd { peer: p.id.clone() });
        }
    }
    if violations.iter().any(|v| matches!(v, Violation::LayerSkip { .. } | Violation::DuplicatePeer { .. })) {
        return ValidationReport { violations };
    }

    match enumerate_working_paths(topology) {
        Ok(paths) if paths.is_empty() => violations.push(Violation::NoWorkingPath),
        Ok(paths) => {
            let on_path: BTreeSet<&PeerId> = paths.peers();
            for p in &by_id {
                if !on_path.contains(&p.id) {
                    violations.push(Violation::NotOnWorkingPath { peer: p.id.clone() });
                }
            }
        }
        Err(TopologyError::PathExplosion { cap }) => violations.push(Violation::PathExplosion { cap }),
        Err(_) => violations.push(Violation::NoWorkingPath),
    }
    ValidationReport { violations }
}

/// Signature of the probability oracle used by minimum-connection synthesis.
pub type UnionOracle<'a> = dyn Fn(&Topology, &ProbAssignment) -> Result<f64, AnalyticsError> + 'a;

/// Greedily adds full-connection edges to the skeleton, always the one with
/// the largest gain in exact success probability (ties go to the
/// lexicographically smallest edge), until the probability exceeds `delta`.
pub fn build_minimum_connection(
    skeleton: &Topology,
    probs: &ProbAssignment,
    params: MinConnectionParams,
    oracle: &UnionOracle<'_>,
) -> Result<MinConnection, TopologyError> {
    let delta = MinConnectionParams::new(params.delta)?.delta;
    let full = full_closure(skeleton)?;
    let full_probability = oracle(&full, probs)?;
    if full_probability <= delta {
        return Err(TopologyError::InfeasibleDelta { delta, full: full_probability });
    }
    let mut current = skeleton.clone();
    current.normalize();
    let mut probability = oracle(&current, probs)?;
    let mut added = Vec::new();
    while probability <= delta {
        if let Some(cap) = params.max_edges {
            if current.edges.len() >= cap {
                return Err(TopologyError::EdgeCapReached { cap, reached: probability });
            }
        }
        let present: BTreeSet<&Edge> = current.edges.iter().collect();
        let missing: Vec<Edge> = full.edges.iter().filter(|e| !present.contains(e)).cloned().collect();
        let mut best: Option<(f64, Edge)> = None;
        for edge in missing {
            let mut trial = current.clone();
            trial.edges.push(edge.clone());
            trial.normalize();
            let p = oracle(&trial, probs)?;
            if best.as_ref().is_none_or(|(bp, _)| p > *bp) {
                best = Some((p, edge));
            }
        }
        let Some((p, edge)) = best else {
            // Only entry points are missing.
            current.terminal_targets = full.terminal_targets.clone();
            probability = oracle(&current, probs)?;
            continue;
        };
        current.edges.push(edge.clone());
        current.normalize();
        probability = p;
        added.push(edge);
    }
    Ok(MinConnection { topology: current, probability, added, full_probability, full_edge_count: full.edges.len() })
}

/// Kind of layer a peer switches within; peers outside any alignment are normal.
pub fn layer_kind_at(topology: &Topology, peer: &PeerId) -> LayerKind {
    topology.alignment_for(peer).map_or(LayerKind::Normal, |a| a.kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerAlignment;

    fn pid(s: &str) -> PeerId {
        PeerId::new(s).unwrap()
    }

    fn chains(n: usize, d: u32) -> Topology {
        build_separate_paths(n, d, |_, _| 0.7).unwrap()
    }

    #[test]
    fn separate_path_counts() {
        let t = chains(3, 4);
        assert_eq!(t.peers.len(), 12);
        assert_eq!(t.edges.len(), 9);
        assert_eq!(enumerate_working_paths(&t).unwrap().len(), 3);
        assert!(validate_topology(&t).is_valid());

        let single = build_separate_paths(1, 1, |_, _| 1.0).unwrap();
        assert_eq!(single.peers.len(), 1);
        assert!(single.edges.is_empty());
        let paths = enumerate_working_paths(&single).unwrap();
        assert_eq!(paths.len(), 1);
        assert_eq!(paths.paths[0].len(), 1);

        assert!(matches!(build_separate_paths(0, 3, |_, _| 1.0), Err(TopologyError::InvalidDimension(_))));
        assert!(matches!(build_separate_paths(2, 0, |_, _| 1.0), Err(TopologyError::InvalidDimension(_))));
    }

    #[test]
    fn full_connection_counts() {
        let t = make_full_connection(&chains(2, 4), &[2]).unwrap();
        assert_eq!(enumerate_working_paths(&t).unwrap().len(), 4);
        for s in t.peers_in_layer(1) {
            assert_eq!(t.targets_of(s).len(), 2);
        }
        let t = make_full_connection(&chains(3, 4), &[2, 3, 4]).unwrap();
        assert_eq!(enumerate_working_paths(&t).unwrap().len(), 81);
        let again = make_full_connection(&t, &[2, 3, 4]).unwrap();
        assert_eq!(again.edges, t.edges);
        assert_eq!(make_full_connection(&t, &[5]), Err(TopologyError::UnknownLayer(5)));
    }

    #[test]
    fn path_cap_is_enforced() {
        let t = make_full_connection(&chains(3, 4), &[2, 3, 4]).unwrap();
        assert_eq!(enumerate_working_paths_capped(&t, 80), Err(TopologyError::PathExplosion { cap: 80 }));
    }

    #[test]
    fn paths_come_out_sorted() {
        let t = make_full_connection(&chains(2, 2), &[2]).unwrap();
        let paths = enumerate_working_paths(&t).unwrap();
        let mut sorted = paths.paths.clone();
        sorted.sort();
        assert_eq!(paths.paths, sorted);
        assert_eq!(paths.len(), 4);
    }

    #[test]
    fn classification() {
        let a = WorkingPath::new(vec![pid("x"), pid("a"), pid("b"), pid("y")]);
        let b = WorkingPath::new(vec![pid("u"), pid("a"), pid("b"), pid("v")]);
        let rel = classify_paths(&a, &b);
        assert_eq!(rel.kind, PathKind::Coupled);
        assert_eq!(rel.common, BTreeSet::from([pid("a"), pid("b")]));
        let c = WorkingPath::new(vec![pid("m"), pid("n")]);
        assert_eq!(classify_paths(&a, &c).kind, PathKind::Separate);
        let own = classify_paths(&a, &a);
        assert_eq!(own.kind, PathKind::Coupled);
        assert_eq!(own.common.len(), 4);
    }

    #[test]
    fn basic_paths() {
        let t = chains(3, 4);
        assert_eq!(extract_basic_paths(&enumerate_working_paths(&t).unwrap()).len(), 3);
        let full = make_full_connection(&chains(2, 2), &[2]).unwrap();
        let basic = extract_basic_paths(&enumerate_working_paths(&full).unwrap());
        assert_eq!(basic.len(), 2);
        assert_eq!(basic.paths[0].peers, vec![pid("p1l1"), pid("p1l2")]);
        let one = PathSet::new(vec![WorkingPath::new(vec![pid("a")])]);
        assert_eq!(extract_basic_paths(&one), one);
    }

    #[test]
    fn validation_findings() {
        let mut t = chains(2, 3);
        t.edges.push(Edge::new(pid("p1l1"), pid("p2l3")));
        let report = validate_topology(&t);
        assert!(report.violations.iter().any(|v| matches!(v, Violation::LayerSkip { .. })), "{report}");

        let mut t = chains(2, 3);
        t.edges.retain(|e| e.source != pid("p2l2"));
        let report = validate_topology(&t);
        assert!(report.violations.contains(&Violation::DeadEnd { peer: pid("p2l2") }), "{report}");
    }

    #[test]
    fn switch_path_normal_layer() {
        let t = make_full_connection(&chains(2, 3), &[2]).unwrap();
        let sp = compute_switch_path(&t, &pid("p1l2"), &[pid("p1l1")], &BTreeSet::new()).unwrap();
        assert_eq!(sp.back, vec![pid("p1l2"), pid("p1l1")]);
        assert_eq!(sp.forward, vec![pid("p2l2")]);
        assert_eq!(sp.len_switch, 3);
        let tried = BTreeSet::from([pid("p2l2")]);
        assert_eq!(
            compute_switch_path(&t, &pid("p1l2"), &[pid("p1l1")], &tried),
            Err(TopologyError::NoAlternative(pid("p1l2")))
        );
        assert!(matches!(
            compute_switch_path(&t, &pid("p1l1"), &[], &BTreeSet::new()),
            Err(TopologyError::NoDecisionPoint(_))
        ));
    }

    fn enhanced_rig() -> Topology {
        // d -> (x1 -> x2) | y -> z
        let peers = [("d", 1), ("x1", 2), ("x2", 2), ("y", 2), ("z", 3)]
            .iter()
            .map(|(id, l)| PeerSpec::worker(pid(id), *l, 0.7))
            .collect();
        let e = |a: &str, b: &str| Edge::new(pid(a), pid(b));
        let mut t = Topology {
            peers,
            edges: vec![e("d", "x1"), e("x1", "x2"), e("x2", "z"), e("d", "y"), e("y", "z")],
            terminal_targets: vec![pid("d")],
            alignments: vec![LayerAlignment {
                logical_layer: 2,
                kind: LayerKind::Enhanced,
                segments: BTreeMap::from([("a".into(), vec![pid("x1"), pid("x2")]), ("b".into(), vec![pid("y")])]),
                interface_compatible: true,
            }],
            layer_timeouts: BTreeMap::new(),
            cache_layer: None,
        };
        t.normalize();
        t
    }

    #[test]
    fn switch_path_enhanced_layer() {
        let t = enhanced_rig();
        assert!(validate_topology(&t).is_valid(), "{}", validate_topology(&t));
        let sp = compute_switch_path(&t, &pid("x2"), &[pid("d"), pid("x1")], &BTreeSet::new()).unwrap();
        assert_eq!(sp.back, vec![pid("x2"), pid("x1"), pid("d")]);
        assert_eq!(sp.forward, vec![pid("y")]);
        assert_eq!(sp.len_switch, 4);
        let sp = compute_switch_path(&t, &pid("y"), &[pid("d")], &BTreeSet::new()).unwrap();
        assert_eq!(sp.forward, vec![pid("x1"), pid("x2")]);
        assert_eq!(sp.len_switch, 4);
        assert_eq!(enumerate_working_paths(&t).unwrap().len(), 2);
    }
}
