//! Exact success probabilities and timing bounds.
//!
//! Three independent exact routes are provided for the probability that at
//! least one working path has every peer up:
//!
//! * [`union_success_probability`] enumerates peer up/down states (subtrees
//!   whose outcome is already decided are summed in one step);
//! * [`inclusion_exclusion_probability`] expands the union over path events;
//! * [`layered_success_probability`] sweeps the layers keeping the
//!   distribution of reachable live peers, which scales to topologies with
//!   more than 30 peers as long as each layer is narrow.
//!
//! Peers fail independently.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LayerKind, PeerId, Topology};
use crate::topology::{enumerate_working_paths, CompiledTopology, PathSet, TopologyError, WorkingPath};

/// Largest number of distinct peers handled by state enumeration.
pub const MAX_ENUMERATED_PEERS: usize = 30;
/// Largest number of paths handled by inclusion–exclusion.
pub const MAX_INCLUSION_EXCLUSION_PATHS: usize = 24;
/// Widest layer handled by the layer sweep.
pub const MAX_LAYER_WIDTH: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalyticsError {
    #[error("no probability for peer {0}")]
    MissingPeer(PeerId),
    #[error("{count} distinct peers exceeds the exact limit of {limit}")]
    TooManyPeers { count: usize, limit: usize },
    #[error("{count} paths exceeds the inclusion-exclusion limit of {limit}")]
    TooManyPaths { count: usize, limit: usize },
    #[error("layer {layer} has {width} peers, above the sweep limit of {limit}")]
    LayerTooWide { layer: u32, width: usize, limit: usize },
    #[error("layer sweep needs every edge to go to the next layer")]
    NotStrictlyLayered,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("value {0} is outside its domain")]
    Domain(f64),
    #[error("no timeout for layer {0}")]
    MissingLayer(u32),
    #[error("cache layer {k} must satisfy 1 <= k < {layers}")]
    CacheLayerOutOfRange { k: u32, layers: u32 },
    #[error("no retry time for path {0}")]
    MissingPath(WorkingPath),
    #[error("topology: {0}")]
    Topology(String),
}

impl From<TopologyError> for AnalyticsError {
    fn from(e: TopologyError) -> Self {
        match e {
            TopologyError::Analytics(inner) => inner,
            other => AnalyticsError::Topology(other.to_string()),
        }
    }
}

fn check_prob(p: f64) -> Result<f64, AnalyticsError> {
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(AnalyticsError::Domain(p))
    }
}

/// Per-peer success probabilities.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbAssignment(BTreeMap<PeerId, f64>);

impl ProbAssignment {
    pub fn new(map: BTreeMap<PeerId, f64>) -> Result<Self, AnalyticsError> {
        for &p in map.values() {
            check_prob(p)?;
        }
        Ok(ProbAssignment(map))
    }

    /// The probabilities configured on the topology's peers.
    pub fn from_topology(topology: &Topology) -> Self {
        ProbAssignment(topology.peers.iter().map(|p| (p.id.clone(), p.success_prob)).collect())
    }

    pub fn uniform(topology: &Topology, p: f64) -> Result<Self, AnalyticsError> {
        check_prob(p)?;
        Ok(ProbAssignment(topology.peers.iter().map(|s| (s.id.clone(), p)).collect()))
    }

    pub fn get(&self, peer: &PeerId) -> Result<f64, AnalyticsError> {
        self.0.get(peer).copied().ok_or_else(|| AnalyticsError::MissingPeer(peer.clone()))
    }

    pub fn set(&mut self, peer: PeerId, p: f64) -> Result<(), AnalyticsError> {
        self.0.insert(peer, check_prob(p)?);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PeerId, &f64)> {
        self.0.iter()
    }

    /// Writes these probabilities onto the topology's peers.
    pub fn apply_to(&self, topology: &mut Topology) -> Result<(), AnalyticsError> {
        for peer in &mut topology.peers {
            peer.success_prob = self.get(&peer.id)?;
        }
        Ok(())
    }
}

/// Timeouts per layer and the retry time charged to each path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimingAssignment {
    pub layer_timeouts: BTreeMap<u32, f64>,
    pub per_path_retry: BTreeMap<WorkingPath, f64>,
}

impl TimingAssignment {
    pub fn with_timeouts(timeouts: impl IntoIterator<Item = f64>) -> Self {
        TimingAssignment { layer_timeouts: (1..).zip(timeouts).collect(), per_path_retry: BTreeMap::new() }
    }

    /// Resolved topology timeouts; each path is charged the timeouts of the
    /// layers of its peers, the worst case of walking it and failing at the end.
    pub fn from_topology(topology: &Topology, paths: &PathSet) -> Self {
        let layer_timeouts = topology.resolved_timeouts();
        let per_path_retry = paths
            .iter()
            .map(|path| {
                let t = path
                    .peers
                    .iter()
                    .map(|p| topology.layer_of(p).and_then(|l| layer_timeouts.get(&l)).copied().unwrap_or(0.0))
                    .sum();
                (path.clone(), t)
            })
            .collect();
        TimingAssignment { layer_timeouts, per_path_retry }
    }
}

/// Product of the probabilities of the path's peers.
pub fn path_success_probability(path: &WorkingPath, probs: &ProbAssignment) -> Result<f64, AnalyticsError> {
    path.peers.iter().try_fold(1.0, |acc, p| Ok(acc * probs.get(p)?))
}

struct Indexed {
    probs: Vec<f64>,
    masks: Vec<u64>,
}

fn index_paths(paths: &PathSet, probs: &ProbAssignment, limit: usize) -> Result<Indexed, AnalyticsError> {
    let peers: Vec<&PeerId> = paths.peers().into_iter().collect();
    if peers.len() > limit {
        return Err(AnalyticsError::TooManyPeers { count: peers.len(), limit });
    }
    let position: BTreeMap<&PeerId, usize> = peers.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let masks = paths.iter().map(|path| path.peers.iter().fold(0u64, |m, p| m | 1 << position[p])).collect();
    let probs = peers.iter().map(|p| probs.get(p)).collect::<Result<_, _>>()?;
    Ok(Indexed { probs, masks })
}

/// Removes duplicate masks and masks that contain another mask; the union of
/// the path events is unchanged.
fn minimal_masks(mut masks: Vec<u64>) -> Vec<u64> {
    masks.sort_unstable_by_key(|m| (m.count_ones(), *m));
    masks.dedup();
    let mut kept: Vec<u64> = Vec::new();
    for m in masks {
        if !kept.iter().any(|k| k & m == *k) {
            kept.push(m);
        }
    }
    kept
}

/// Exact probability that at least one path has all its peers up, by
/// enumerating up/down states of the distinct peers.
pub fn union_success_probability(paths: &PathSet, probs: &ProbAssignment) -> Result<f64, AnalyticsError> {
    if paths.is_empty() {
        return Ok(0.0);
    }
    let Indexed { probs, masks } = index_paths(paths, probs, MAX_ENUMERATED_PEERS)?;
    let masks = minimal_masks(masks);
    Ok(enumerate_states(&probs, &masks, 0, 0, 0, 1.0))
}

fn enumerate_states(probs: &[f64], masks: &[u64], next: usize, up: u64, down: u64, weight: f64) -> f64 {
    if masks.iter().any(|&m| m & !up == 0) {
        return weight;
    }
    if masks.iter().all(|&m| m & down != 0) || next == probs.len() {
        return 0.0;
    }
    let bit = 1u64 << next;
    let p = probs[next];
    enumerate_states(probs, masks, next + 1, up | bit, down, weight * p)
        + enumerate_states(probs, masks, next + 1, up, down | bit, weight * (1.0 - p))
}

/// Exact union probability by inclusion–exclusion over every non-empty
/// subset of path events.
pub fn inclusion_exclusion_probability(paths: &PathSet, probs: &ProbAssignment) -> Result<f64, AnalyticsError> {
    if paths.len() > MAX_INCLUSION_EXCLUSION_PATHS {
        return Err(AnalyticsError::TooManyPaths { count: paths.len(), limit: MAX_INCLUSION_EXCLUSION_PATHS });
    }
    let Indexed { probs, masks } = index_paths(paths, probs, 64)?;
    let product = |mask: u64| {
        let mut acc = 1.0;
        let mut rest = mask;
        while rest != 0 {
            acc *= probs[rest.trailing_zeros() as usize];
            rest &= rest - 1;
        }
        acc
    };
    fn expand(masks: &[u64], start: usize, union: u64, size: usize, product: &dyn Fn(u64) -> f64) -> f64 {
        let mut total = 0.0;
        for i in start..masks.len() {
            let u = union | masks[i];
            let sign = if size.is_multiple_of(2) { 1.0 } else { -1.0 };
            total += sign * product(u) + expand(masks, i + 1, u, size + 1, product);
        }
        total
    }
    Ok(expand(&masks, 0, 0, 0, &product))
}

/// Exact probability that some working path of the topology is fully up,
/// computed layer by layer.
///
/// Requires every edge to go from layer `m` to layer `m + 1`.
pub fn layered_success_probability(topology: &Topology, probs: &ProbAssignment) -> Result<f64, AnalyticsError> {
    let c = CompiledTopology::new(topology)?;
    if c.is_empty() {
        return Ok(0.0);
    }
    for (s, targets) in c.targets.iter().enumerate() {
        if targets.iter().any(|&t| c.layer[t] != c.layer[s] + 1) {
            return Err(AnalyticsError::NotStrictlyLayered);
        }
    }
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for i in 0..c.len() {
        members.entry(c.layer[i]).or_default().push(i);
    }
    for (&layer, m) in &members {
        if m.len() > MAX_LAYER_WIDTH {
            return Err(AnalyticsError::LayerTooWide { layer, width: m.len(), limit: MAX_LAYER_WIDTH });
        }
    }
    if c.entries.iter().any(|&e| c.layer[e] != 1) {
        return Err(AnalyticsError::NotStrictlyLayered);
    }
    let p: Vec<f64> = c.ids.iter().map(|id| probs.get(id)).collect::<Result<_, _>>()?;
    let mut slot = vec![0usize; c.len()];
    for m in members.values() {
        for (i, &peer) in m.iter().enumerate() {
            slot[peer] = i;
        }
    }

    // Distribution over the set of live peers reached in the current layer;
    // the empty set is dropped since it can no longer succeed.
    let mut dist = spread(&BTreeMap::from([(0u64, 1.0)]), |_| c.entries.clone(), &p, &slot);
    for layer in 1..c.max_layer {
        let layer_members = &members[&layer];
        dist = spread(
            &dist,
            |live| {
                let mut t: Vec<usize> = layer_members
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| live & (1 << i) != 0)
                    .flat_map(|(_, &peer)| c.targets[peer].iter().copied())
                    .collect();
                t.sort_unstable();
                t.dedup();
                t
            },
            &p,
            &slot,
        );
    }
    let finals = &members[&c.max_layer];
    Ok(dist
        .iter()
        .filter(|(&live, _)| finals.iter().enumerate().any(|(i, &peer)| live & (1 << i) != 0 && c.is_final[peer]))
        .map(|(_, w)| w)
        .sum())
}

fn spread(
    dist: &BTreeMap<u64, f64>,
    candidates_of: impl Fn(u64) -> Vec<usize>,
    p: &[f64],
    slot: &[usize],
) -> BTreeMap<u64, f64> {
    let mut next = BTreeMap::new();
    for (&live, &w) in dist {
        let candidates = candidates_of(live);
        for subset in 1u64..(1 << candidates.len()) {
            let mut weight = w;
            let mut mask = 0u64;
            for (i, &peer) in candidates.iter().enumerate() {
                if subset & (1 << i) != 0 {
                    weight *= p[peer];
                    mask |= 1 << slot[peer];
                } else {
                    weight *= 1.0 - p[peer];
                }
            }
            *next.entry(mask).or_insert(0.0) += weight;
        }
    }
    next
}

/// Exact success probability of a topology, choosing the route by size.
pub fn topology_success_probability(topology: &Topology, probs: &ProbAssignment) -> Result<f64, AnalyticsError> {
    let distinct = topology.peers.len();
    if distinct <= MAX_ENUMERATED_PEERS {
        let paths = enumerate_working_paths(topology)?;
        return union_success_probability(&paths, probs);
    }
    layered_success_probability(topology, probs)
}

/// Closed forms for two paths meeting at one layer.
///
/// * normal: one peer on each side, `a + b - ab`;
/// * enhanced: a chain on side one against a single peer on side two;
/// * virtual: a chain on each side.
pub fn two_path_layer_probability(kind: LayerKind, side1: &[f64], side2: &[f64]) -> Result<f64, AnalyticsError> {
    if side1.is_empty() || side2.is_empty() {
        return Err(AnalyticsError::Shape("both sides need at least one peer".into()));
    }
    for &p in side1.iter().chain(side2) {
        check_prob(p)?;
    }
    match kind {
        LayerKind::Normal if side1.len() != 1 || side2.len() != 1 => {
            return Err(AnalyticsError::Shape("normal layers have one peer per side".into()))
        }
        LayerKind::Enhanced if side2.len() != 1 => {
            return Err(AnalyticsError::Shape("enhanced layers pit a chain against one peer".into()))
        }
        _ => {}
    }
    let a: f64 = side1.iter().product();
    let b: f64 = side2.iter().product();
    Ok(a + b - a * b)
}

/// Per-peer probability when a path of probability `path_prob` is split
/// into `n` equally reliable layers.
pub fn divide_layer_probability(path_prob: f64, n: u32) -> Result<f64, AnalyticsError> {
    check_prob(path_prob)?;
    if n == 0 {
        return Err(AnalyticsError::Domain(0.0));
    }
    Ok(path_prob.powf(1.0 / n as f64))
}

fn layer_count(timing: &TimingAssignment) -> Result<u32, AnalyticsError> {
    let n = timing.layer_timeouts.keys().next_back().copied().unwrap_or(0);
    for layer in 1..=n {
        let t = *timing.layer_timeouts.get(&layer).ok_or(AnalyticsError::MissingLayer(layer))?;
        if t.is_nan() || t < 0.0 {
            return Err(AnalyticsError::Domain(t));
        }
    }
    Ok(n)
}

/// Longest the terminal may wait: the sum of every layer timeout.
pub fn max_wait_total(timing: &TimingAssignment) -> Result<f64, AnalyticsError> {
    let n = layer_count(timing)?;
    Ok((1..=n).map(|l| timing.layer_timeouts[&l]).sum())
}

/// Terminal wait when layer `k` caches requests: timeouts of layers `1..=k`.
pub fn terminal_wait_with_cache(timing: &TimingAssignment, k: u32) -> Result<f64, AnalyticsError> {
    let n = layer_count(timing)?;
    if k == 0 || k >= n {
        return Err(AnalyticsError::CacheLayerOutOfRange { k, layers: n });
    }
    Ok((1..=k).map(|l| timing.layer_timeouts[&l]).sum())
}

/// Worst-case retry time: the sum of the retry time of every path.
pub fn retry_time_bound(paths: &PathSet, timing: &TimingAssignment) -> Result<f64, AnalyticsError> {
    paths
        .iter()
        .map(|p| timing.per_path_retry.get(p).copied().ok_or_else(|| AnalyticsError::MissingPath(p.clone())))
        .sum()
}

/// Peers of `paths` that appear on more than one path.
pub fn shared_peers(paths: &PathSet) -> BTreeSet<PeerId> {
    let mut seen = BTreeSet::new();
    let mut shared = BTreeSet::new();
    for p in paths.iter().flat_map(|p| p.peers.iter()) {
        if !seen.insert(p) {
            shared.insert(p.clone());
        }
    }
    shared
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_separate_paths, make_full_connection};

    fn pid(s: &str) -> PeerId {
        PeerId::new(s).unwrap()
    }

    fn path(ids: &[&str]) -> WorkingPath {
        WorkingPath::new(ids.iter().map(|s| pid(s)).collect())
    }

    fn probs(pairs: &[(&str, f64)]) -> ProbAssignment {
        ProbAssignment::new(pairs.iter().map(|(k, v)| (pid(k), *v)).collect()).unwrap()
    }

    #[test]
    fn path_products() {
        let pr = probs(&[("a", 0.7), ("b", 0.7), ("c", 0.7), ("d", 0.7), ("z", 0.0)]);
        let p = path_success_probability(&path(&["a", "b", "c", "d"]), &pr).unwrap();
        assert!((p - 0.2401).abs() < 1e-12);
        assert_eq!(path_success_probability(&path(&["a", "z"]), &pr).unwrap(), 0.0);
        assert_eq!(path_success_probability(&path(&["q"]), &pr), Err(AnalyticsError::MissingPeer(pid("q"))));
    }

    #[test]
    fn union_examples() {
        let pr = probs(&[("a", 0.5), ("b", 0.5), ("c", 0.5)]);
        let two = PathSet::new(vec![path(&["a"]), path(&["b"])]);
        assert!((union_success_probability(&two, &pr).unwrap() - 0.75).abs() < 1e-12);

        // A->B and A->C, frozen from the 2^3 state table: states with A up and
        // at least one of B, C up are 110, 101, 111 -> 3/8.
        let shared = PathSet::new(vec![path(&["a", "b"]), path(&["a", "c"])]);
        assert!((union_success_probability(&shared, &pr).unwrap() - 0.375).abs() < 1e-12);
        assert!((inclusion_exclusion_probability(&shared, &pr).unwrap() - 0.375).abs() < 1e-12);
    }

    #[test]
    fn four_disjoint_half_paths() {
        let t = build_separate_paths(4, 1, |_, _| 0.5).unwrap();
        let paths = enumerate_working_paths(&t).unwrap();
        let pr = ProbAssignment::from_topology(&t);
        assert!((union_success_probability(&paths, &pr).unwrap() - 0.9375).abs() < 1e-12);
    }

    #[test]
    fn disjoint_pair_matches_closed_form() {
        let t = build_separate_paths(2, 3, |path, _| if path == 1 { 0.9 } else { 0.6 }).unwrap();
        let paths = enumerate_working_paths(&t).unwrap();
        let pr = ProbAssignment::from_topology(&t);
        let (p1, p2) = (0.9f64.powi(3), 0.6f64.powi(3));
        let u = union_success_probability(&paths, &pr).unwrap();
        assert!((u - (p1 + p2 - p1 * p2)).abs() < 1e-12);
    }

    #[test]
    fn size_limit() {
        let t = build_separate_paths(31, 1, |_, _| 0.5).unwrap();
        let paths = enumerate_working_paths(&t).unwrap();
        let pr = ProbAssignment::from_topology(&t);
        assert!(matches!(union_success_probability(&paths, &pr), Err(AnalyticsError::TooManyPeers { .. })));
    }

    #[test]
    fn layer_sweep_agrees_on_grid() {
        let base = build_separate_paths(3, 4, |_, _| 0.7).unwrap();
        for layers in [vec![], vec![2], vec![2, 3], vec![2, 3, 4]] {
            let t = make_full_connection(&base, &layers).unwrap();
            let pr = ProbAssignment::from_topology(&t);
            let exact = union_success_probability(&enumerate_working_paths(&t).unwrap(), &pr).unwrap();
            let sweep = layered_success_probability(&t, &pr).unwrap();
            assert!((exact - sweep).abs() < 1e-12, "{layers:?}: {exact} vs {sweep}");
        }
    }

    #[test]
    fn layer_closed_forms() {
        let n = two_path_layer_probability(LayerKind::Normal, &[0.7], &[0.7]).unwrap();
        assert!((n - 0.91).abs() < 1e-12);
        let e = two_path_layer_probability(LayerKind::Enhanced, &[0.7, 0.7], &[0.7]).unwrap();
        assert!((e - 0.847).abs() < 1e-12);
        let v = two_path_layer_probability(LayerKind::Virtual, &[0.7, 0.7], &[0.7, 0.7]).unwrap();
        assert!((v - 0.7399).abs() < 1e-12);
        assert!(two_path_layer_probability(LayerKind::Normal, &[0.7, 0.7], &[0.7]).is_err());
        assert!(two_path_layer_probability(LayerKind::Enhanced, &[0.7], &[0.7, 0.7]).is_err());
        assert!(two_path_layer_probability(LayerKind::Virtual, &[], &[0.7]).is_err());
    }

    #[test]
    fn layer_division() {
        assert_eq!(divide_layer_probability(0.5, 1).unwrap(), 0.5);
        assert!((divide_layer_probability(0.5, 2).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let eighth = divide_layer_probability(0.5, 8).unwrap();
        assert!((eighth - 0.917_004_043_204_671_2).abs() < 1e-12);
        assert!((eighth.powi(8) - 0.5).abs() < 1e-12);
        assert_eq!(divide_layer_probability(1.5, 2), Err(AnalyticsError::Domain(1.5)));
        assert!(divide_layer_probability(0.5, 0).is_err());
    }

    #[test]
    fn waits() {
        let t = TimingAssignment::with_timeouts([2.0, 3.0, 5.0]);
        assert_eq!(max_wait_total(&t).unwrap(), 10.0);
        assert_eq!(max_wait_total(&TimingAssignment::with_timeouts([7.0])).unwrap(), 7.0);
        assert_eq!(max_wait_total(&TimingAssignment::with_timeouts([0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(terminal_wait_with_cache(&t, 1).unwrap(), 2.0);
        assert_eq!(terminal_wait_with_cache(&t, 2).unwrap(), 5.0);
        assert_eq!(terminal_wait_with_cache(&t, 3), Err(AnalyticsError::CacheLayerOutOfRange { k: 3, layers: 3 }));
        let mut gap = t.clone();
        gap.layer_timeouts.remove(&2);
        assert_eq!(max_wait_total(&gap), Err(AnalyticsError::MissingLayer(2)));
    }

    #[test]
    fn retry_bounds() {
        let paths: Vec<_> = ["a", "b", "c", "d"].iter().map(|s| path(&[s])).collect();
        let timing = TimingAssignment {
            layer_timeouts: BTreeMap::new(),
            per_path_retry: paths.iter().map(|p| (p.clone(), 2.0)).collect(),
        };
        assert_eq!(retry_time_bound(&PathSet::new(paths.clone()), &timing).unwrap(), 8.0);
        assert_eq!(retry_time_bound(&PathSet::new(paths[..2].to_vec()), &timing).unwrap(), 4.0);
        assert_eq!(retry_time_bound(&PathSet::default(), &timing).unwrap(), 0.0);
        assert!(retry_time_bound(&PathSet::new(vec![path(&["q"])]), &timing).is_err());
    }
}
