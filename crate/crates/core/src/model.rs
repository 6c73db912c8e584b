//! Domain types shared across the crate: tasks, results, peers, layer
//! alignments and the topology container.
//!
//! Every type here serializes to JSON with `lower_snake_case` field names and
//! rejects unknown fields on input.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use base64::Engine as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Name reserved for the task originator on the wire.
pub const TERMINAL: &str = "terminal";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("peer {0} already signed this task")]
    DuplicateSignature(PeerId),
    #[error("peer {peer} at layer {layer} cannot sign after a layer-{last} signature")]
    LayerOrder { peer: PeerId, layer: u32, last: u32 },
    #[error("peer {0} is in the task's tried set")]
    SignatureFromTriedPeer(PeerId),
    #[error("invalid peer id {0:?}: {1}")]
    InvalidPeerId(String, &'static str),
}

/// Identifier of a software peer. Non-empty, printable, no whitespace.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct PeerId(String);

impl PeerId {
    pub fn new(value: impl Into<String>) -> Result<Self, ModelError> {
        let value = value.into();
        if value.is_empty() {
            return Err(ModelError::InvalidPeerId(value, "empty"));
        }
        if value.len() > 64 {
            return Err(ModelError::InvalidPeerId(value, "longer than 64 bytes"));
        }
        if value.chars().any(|c| c.is_whitespace() || c.is_control()) {
            return Err(ModelError::InvalidPeerId(value, "contains whitespace or control characters"));
        }
        if value == TERMINAL {
            return Err(ModelError::InvalidPeerId(value, "reserved for the terminal"));
        }
        Ok(PeerId(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for PeerId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        PeerId::new(raw).map_err(serde::de::Error::custom)
    }
}

/// Unique task identifier.
///
/// Live runs draw 128 random bits; simulations pack `(run_index, counter)`
/// into the high and low halves so traces are stable across reruns. The wire
/// form is 32 lowercase hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(u128);

impl TaskId {
    pub fn from_u128(value: u128) -> Self {
        TaskId(value)
    }

    pub fn simulated(run_index: u64, counter: u64) -> Self {
        TaskId(((run_index as u128) << 64) | counter as u128)
    }

    pub fn as_u128(self) -> u128 {
        self.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl Serialize for TaskId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TaskId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        if raw.len() != 32 {
            return Err(serde::de::Error::custom("task id must be 32 hex digits"));
        }
        u128::from_str_radix(&raw, 16).map(TaskId).map_err(serde::de::Error::custom)
    }
}

/// Source of fresh task identifiers.
pub trait IdSource {
    fn next_id(&mut self) -> TaskId;
}

/// Random 128-bit ids for live mode.
#[derive(Debug, Default)]
pub struct RandomIds;

impl IdSource for RandomIds {
    fn next_id(&mut self) -> TaskId {
        TaskId(rand::random())
    }
}

/// `(run_index, counter)` ids for simulations.
#[derive(Debug, Clone)]
pub struct SequentialIds {
    run_index: u64,
    counter: u64,
}

impl SequentialIds {
    pub fn new(run_index: u64) -> Self {
        SequentialIds { run_index, counter: 0 }
    }
}

impl IdSource for SequentialIds {
    fn next_id(&mut self) -> TaskId {
        let id = TaskId::simulated(self.run_index, self.counter);
        self.counter += 1;
        id
    }
}

/// Opaque task payload, carried as base64 in JSON.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Payload(pub Vec<u8>);

impl Serialize for Payload {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&base64::engine::general_purpose::STANDARD.encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for Payload {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        base64::engine::general_purpose::STANDARD.decode(raw).map(Payload).map_err(serde::de::Error::custom)
    }
}

/// Either end of a hop: the terminal or a peer. Serialized as the peer id,
/// or `"terminal"`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Terminal,
    Peer(PeerId),
}

impl Endpoint {
    pub fn as_str(&self) -> &str {
        match self {
            Endpoint::Terminal => TERMINAL,
            Endpoint::Peer(p) => p.as_str(),
        }
    }

    pub fn peer(&self) -> Option<&PeerId> {
        match self {
            Endpoint::Terminal => None,
            Endpoint::Peer(p) => Some(p),
        }
    }
}

impl From<PeerId> for Endpoint {
    fn from(p: PeerId) -> Self {
        Endpoint::Peer(p)
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Endpoint {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Endpoint {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        if raw == TERMINAL {
            return Ok(Endpoint::Terminal);
        }
        PeerId::new(raw).map(Endpoint::Peer).map_err(serde::de::Error::custom)
    }
}

/// A peer's mark on a task it processed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Signature {
    pub peer: PeerId,
    pub layer: u32,
}

/// A repeatable unit of work.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub id: TaskId,
    pub payload: Payload,
    /// Signatures in processing order.
    pub trace: Vec<Signature>,
    /// Peers known to be hung or exhausted for this task.
    pub tried: BTreeSet<PeerId>,
    /// Re-issue counter, bumped each time the terminal gives up and resends.
    pub attempt: u32,
}

impl Task {
    pub fn new(payload: impl Into<Vec<u8>>, ids: &mut dyn IdSource) -> Self {
        Task {
            id: ids.next_id(),
            payload: Payload(payload.into()),
            trace: Vec::new(),
            tried: BTreeSet::new(),
            attempt: 0,
        }
    }

    pub fn append_signature(&mut self, peer: PeerId, layer: u32) -> Result<(), ModelError> {
        if self.trace.iter().any(|s| s.peer == peer) {
            return Err(ModelError::DuplicateSignature(peer));
        }
        if self.tried.contains(&peer) {
            return Err(ModelError::SignatureFromTriedPeer(peer));
        }
        if let Some(last) = self.trace.last() {
            if layer < last.layer {
                return Err(ModelError::LayerOrder { peer, layer, last: last.layer });
            }
        }
        self.trace.push(Signature { peer, layer });
        Ok(())
    }

    /// Peers in the trace, in order.
    pub fn path(&self) -> Vec<PeerId> {
        self.trace.iter().map(|s| s.peer.clone()).collect()
    }

    /// The same task prepared for re-issue: fresh trace and tried set.
    pub fn reissued(&self) -> Task {
        Task {
            id: self.id,
            payload: self.payload.clone(),
            trace: Vec::new(),
            tried: BTreeSet::new(),
            attempt: self.attempt + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
}

/// The return handle delivered for a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskResult {
    pub task_id: TaskId,
    pub outcome: Outcome,
    pub return_path: Vec<PeerId>,
    pub reason: Option<String>,
    /// Seconds since the terminal first sent the task.
    pub completed_at: f64,
}

impl TaskResult {
    pub fn success(task_id: TaskId, return_path: Vec<PeerId>, completed_at: f64) -> Self {
        TaskResult { task_id, outcome: Outcome::Success, return_path, reason: None, completed_at }
    }

    pub fn failure(task_id: TaskId, reason: impl Into<String>, completed_at: f64) -> Self {
        let mut reason = reason.into();
        if reason.is_empty() {
            reason.push_str("unspecified");
        }
        TaskResult { task_id, outcome: Outcome::Failure, return_path: Vec::new(), reason: Some(reason), completed_at }
    }

    pub fn is_success(&self) -> bool {
        self.outcome == Outcome::Success
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Worker,
    Cache,
}

fn default_processing_time() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerSpec {
    pub id: PeerId,
    pub layer: u32,
    /// Probability that the peer answers a given request.
    pub success_prob: f64,
    #[serde(default = "default_processing_time")]
    pub processing_time: f64,
    #[serde(default)]
    pub role: Role,
}

impl PeerSpec {
    pub fn worker(id: PeerId, layer: u32, success_prob: f64) -> Self {
        PeerSpec { id, layer, success_prob, processing_time: 1.0, role: Role::Worker }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Single peers on each path share the interface.
    Normal,
    /// A chain of peers on one path matches a single peer's interface on another.
    Enhanced,
    /// Same function, no shared interface.
    Virtual,
}

/// How the paths line up at one logical layer.
///
/// Each segment is the run of peers a path contributes to this layer. For
/// virtual layers a segment includes the interface-specific peers that lead
/// up to the functional peer, so its length is at least two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerAlignment {
    pub logical_layer: u32,
    pub kind: LayerKind,
    pub segments: BTreeMap<String, Vec<PeerId>>,
    pub interface_compatible: bool,
}

impl LayerAlignment {
    /// Returns a description of the first shape rule this alignment breaks.
    pub fn shape_violation(&self) -> Option<String> {
        if self.segments.len() < 2 {
            return Some("needs at least two segments".into());
        }
        if self.segments.values().any(Vec::is_empty) {
            return Some("empty segment".into());
        }
        match self.kind {
            LayerKind::Normal => {
                if self.segments.values().any(|s| s.len() != 1) {
                    return Some("normal segments must have length 1".into());
                }
                if !self.interface_compatible {
                    return Some("normal layers share an interface".into());
                }
            }
            LayerKind::Enhanced => {
                if !self.interface_compatible {
                    return Some("enhanced layers must be interface compatible".into());
                }
                if self.segments.values().all(|s| s.len() < 2) {
                    return Some("enhanced layers need a segment of length >= 2".into());
                }
            }
            LayerKind::Virtual => {
                if self.interface_compatible {
                    return Some("virtual layers are not interface compatible".into());
                }
                if self.segments.values().any(|s| s.len() < 2) {
                    return Some("virtual segments need at least one lead-in peer".into());
                }
            }
        }
        None
    }

    pub fn segment_of(&self, peer: &PeerId) -> Option<(&str, &[PeerId])> {
        self.segments.iter().find(|(_, seg)| seg.contains(peer)).map(|(k, seg)| (k.as_str(), seg.as_slice()))
    }
}

/// Directed interaction from a source peer to a target peer.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub source: PeerId,
    pub target: PeerId,
}

impl Edge {
    pub fn new(source: PeerId, target: PeerId) -> Self {
        Edge { source, target }
    }
}

/// The directed layered graph of peers reachable from the terminal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub peers: Vec<PeerSpec>,
    pub edges: Vec<Edge>,
    pub terminal_targets: Vec<PeerId>,
    #[serde(default)]
    pub alignments: Vec<LayerAlignment>,
    /// Per-layer wait before a silent target is declared down. Layers not
    /// listed fall back to three times the slowest peer in that layer.
    #[serde(default)]
    pub layer_timeouts: BTreeMap<u32, f64>,
    #[serde(default)]
    pub cache_layer: Option<u32>,
}

impl Topology {
    /// Sorts peers, edges and entry points and drops duplicate edges.
    pub fn normalize(&mut self) {
        self.peers.sort_by(|a, b| a.id.cmp(&b.id));
        self.edges.sort();
        self.edges.dedup();
        self.terminal_targets.sort();
        self.terminal_targets.dedup();
    }

    pub fn peer(&self, id: &PeerId) -> Option<&PeerSpec> {
        self.peers.iter().find(|p| &p.id == id)
    }

    pub fn contains(&self, id: &PeerId) -> bool {
        self.peer(id).is_some()
    }

    pub fn layer_of(&self, id: &PeerId) -> Option<u32> {
        self.peer(id).map(|p| p.layer)
    }

    pub fn max_layer(&self) -> u32 {
        self.peers.iter().map(|p| p.layer).max().unwrap_or(0)
    }

    pub fn peers_in_layer(&self, layer: u32) -> Vec<&PeerId> {
        let mut ids: Vec<_> = self.peers.iter().filter(|p| p.layer == layer).map(|p| &p.id).collect();
        ids.sort();
        ids
    }

    /// Targets of `id`, sorted.
    pub fn targets_of(&self, id: &PeerId) -> Vec<&PeerId> {
        let mut out: Vec<_> = self.edges.iter().filter(|e| &e.source == id).map(|e| &e.target).collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn has_edge(&self, source: &PeerId, target: &PeerId) -> bool {
        self.edges.iter().any(|e| &e.source == source && &e.target == target)
    }

    /// A peer completes the task when it sits in the last layer and forwards nowhere.
    pub fn is_final(&self, id: &PeerId) -> bool {
        self.layer_of(id) == Some(self.max_layer()) && self.targets_of(id).is_empty()
    }

    /// Timeout used when waiting on a layer-`layer` target.
    pub fn layer_timeout(&self, layer: u32) -> f64 {
        if let Some(t) = self.layer_timeouts.get(&layer) {
            return *t;
        }
        let slowest = self.peers.iter().filter(|p| p.layer == layer).map(|p| p.processing_time).fold(0.0_f64, f64::max);
        3.0 * slowest
    }

    /// Timeouts for layers `1..=max_layer`, explicit or defaulted.
    pub fn resolved_timeouts(&self) -> BTreeMap<u32, f64> {
        (1..=self.max_layer()).map(|l| (l, self.layer_timeout(l))).collect()
    }

    /// True when `path` starts at a terminal target, follows edges and ends at a final peer.
    pub fn is_working_path(&self, path: &[PeerId]) -> bool {
        let (Some(first), Some(last)) = (path.first(), path.last()) else {
            return false;
        };
        let distinct: BTreeSet<_> = path.iter().collect();
        distinct.len() == path.len()
            && self.terminal_targets.contains(first)
            && path.windows(2).all(|w| self.has_edge(&w[0], &w[1]))
            && self.is_final(last)
    }

    pub fn alignment_for(&self, peer: &PeerId) -> Option<&LayerAlignment> {
        self.alignments.iter().find(|a| a.segment_of(peer).is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pid(s: &str) -> PeerId {
        PeerId::new(s).unwrap()
    }

    #[test]
    fn new_task_is_blank() {
        let mut ids = SequentialIds::new(0);
        let task = Task::new("job-A", &mut ids);
        assert!(task.trace.is_empty());
        assert!(task.tried.is_empty());
        assert_eq!(task.attempt, 0);
        assert_eq!(task.payload.0, b"job-A");
        let other = Task::new("job-A", &mut ids);
        assert_ne!(task.id, other.id);
    }

    #[test]
    fn ten_thousand_random_ids_are_distinct() {
        let mut ids = RandomIds;
        let set: BTreeSet<_> = (0..10_000).map(|_| ids.next_id()).collect();
        assert_eq!(set.len(), 10_000);
        let mut seq = SequentialIds::new(3);
        let set: BTreeSet<_> = (0..10_000).map(|_| seq.next_id()).collect();
        assert_eq!(set.len(), 10_000);
    }

    #[test]
    fn signatures_append_in_order() {
        let mut task = Task::new("x", &mut SequentialIds::new(0));
        task.append_signature(pid("s1"), 1).unwrap();
        task.append_signature(pid("s2"), 2).unwrap();
        assert_eq!(task.path(), vec![pid("s1"), pid("s2")]);
        assert_eq!(task.append_signature(pid("s1"), 3), Err(ModelError::DuplicateSignature(pid("s1"))));
        assert!(matches!(task.append_signature(pid("s0"), 1), Err(ModelError::LayerOrder { .. })));
        task.tried.insert(pid("s9"));
        assert!(matches!(task.append_signature(pid("s9"), 3), Err(ModelError::SignatureFromTriedPeer(_))));
    }

    #[test]
    fn peer_id_rules() {
        assert!(PeerId::new("").is_err());
        assert!(PeerId::new("a b").is_err());
        assert!(PeerId::new("terminal").is_err());
        assert!(PeerId::new("p01l02").is_ok());
        assert!(serde_json::from_str::<PeerId>("\"\"").is_err());
    }

    #[test]
    fn failure_results_carry_a_reason() {
        let r = TaskResult::failure(TaskId::from_u128(1), "", 0.0);
        assert!(r.return_path.is_empty());
        assert_eq!(r.reason.as_deref(), Some("unspecified"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let json = r#"{"id":"a","layer":1,"success_prob":0.5,"bogus":1}"#;
        let err = serde_json::from_str::<PeerSpec>(json).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn alignment_shapes() {
        let seg = |v: &[&str]| v.iter().map(|s| pid(s)).collect::<Vec<_>>();
        let mut a = LayerAlignment {
            logical_layer: 2,
            kind: LayerKind::Normal,
            segments: BTreeMap::from([("a".into(), seg(&["x"])), ("b".into(), seg(&["y"]))]),
            interface_compatible: true,
        };
        assert_eq!(a.shape_violation(), None);
        a.kind = LayerKind::Enhanced;
        assert!(a.shape_violation().is_some());
        a.segments.insert("a".into(), seg(&["x", "x2"]));
        assert_eq!(a.shape_violation(), None);
        a.kind = LayerKind::Virtual;
        assert!(a.shape_violation().is_some());
        a.interface_compatible = false;
        a.segments.insert("b".into(), seg(&["y0", "y"]));
        assert_eq!(a.shape_violation(), None);
    }
}
