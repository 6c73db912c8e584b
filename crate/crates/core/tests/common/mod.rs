//! Topology generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::Rng;

use peerweave::model::{Edge, LayerAlignment, LayerKind, PeerId, PeerSpec, Topology};

pub fn pid(s: &str) -> PeerId {
    PeerId::new(s).unwrap()
}

/// Shape of a random strictly layered topology: per-layer probabilities and
/// one bit per possible edge between consecutive layers.
#[derive(Debug, Clone)]
pub struct Shape {
    pub layers: Vec<Vec<f64>>,
    pub edge_bits: Vec<bool>,
}

/// Builds a valid topology from `shape`. Missing links are patched so every
/// peer has a source and a target: a peer without targets links to the
/// first peer of the next layer, a peer without sources gets one from the
/// first peer of the previous layer.
pub fn build(shape: &Shape) -> Topology {
    let id = |l: usize, i: usize| pid(&format!("n{}x{}", l + 1, i));
    let mut peers = Vec::new();
    for (l, ps) in shape.layers.iter().enumerate() {
        for (i, &p) in ps.iter().enumerate() {
            peers.push(PeerSpec::worker(id(l, i), l as u32 + 1, p));
        }
    }
    let mut edges = Vec::new();
    let mut bits = shape.edge_bits.iter().cycle();
    for l in 0..shape.layers.len().saturating_sub(1) {
        let (wa, wb) = (shape.layers[l].len(), shape.layers[l + 1].len());
        let mut has_out = vec![false; wa];
        let mut has_in = vec![false; wb];
        for (a, out) in has_out.iter_mut().enumerate() {
            for (b, inc) in has_in.iter_mut().enumerate() {
                if *bits.next().unwrap_or(&true) {
                    edges.push(Edge::new(id(l, a), id(l + 1, b)));
                    *out = true;
                    *inc = true;
                }
            }
        }
        for a in (0..wa).filter(|&a| !has_out[a]) {
            edges.push(Edge::new(id(l, a), id(l + 1, 0)));
            has_in[0] = true;
        }
        for b in (0..wb).filter(|&b| !has_in[b]) {
            edges.push(Edge::new(id(l, 0), id(l + 1, b)));
        }
    }
    let terminal_targets = (0..shape.layers[0].len()).map(|i| id(0, i)).collect();
    let mut t = Topology {
        peers,
        edges,
        terminal_targets,
        alignments: Vec::new(),
        layer_timeouts: BTreeMap::new(),
        cache_layer: None,
    };
    t.normalize();
    t
}

/// Random layered topologies with at most `max_layers` layers of at most
/// `max_width` peers each.
pub fn shape_strategy(max_layers: usize, max_width: usize) -> impl Strategy<Value = Shape> {
    let layer = prop::collection::vec(0.0f64..=1.0, 1..=max_width);
    (prop::collection::vec(layer, 1..=max_layers), prop::collection::vec(any::<bool>(), 1..64))
        .prop_map(|(layers, edge_bits)| Shape { layers, edge_bits })
}

/// Same distribution as [`shape_strategy`], drawn from a plain RNG.
pub fn random_shape<R: Rng>(rng: &mut R, max_layers: usize, max_width: usize) -> Shape {
    let n = rng.gen_range(1..=max_layers);
    let layers = (0..n).map(|_| (0..rng.gen_range(1..=max_width)).map(|_| rng.gen::<f64>()).collect()).collect();
    let edge_bits = (0..rng.gen_range(1..64)).map(|_| rng.gen()).collect();
    Shape { layers, edge_bits }
}

/// `d` feeds two segments of one logical layer, both ending in `z`:
/// `a1..a{a_len}` and `b1..b{b_len}`.
pub fn aligned_rig(kind: LayerKind, a_len: usize, b_len: usize) -> Topology {
    let seg = |name: &str, n: usize| (1..=n).map(|i| pid(&format!("{name}{i}"))).collect::<Vec<_>>();
    let (a, b) = (seg("a", a_len), seg("b", b_len));
    let mut peers = vec![PeerSpec::worker(pid("d"), 1, 0.9), PeerSpec::worker(pid("z"), 3, 0.9)];
    let mut edges = Vec::new();
    for s in [&a, &b] {
        peers.extend(s.iter().map(|p| PeerSpec::worker(p.clone(), 2, 0.9)));
        edges.push(Edge::new(pid("d"), s[0].clone()));
        edges.extend(s.windows(2).map(|w| Edge::new(w[0].clone(), w[1].clone())));
        edges.push(Edge::new(s.last().unwrap().clone(), pid("z")));
    }
    let mut t = Topology {
        peers,
        edges,
        terminal_targets: vec![pid("d")],
        alignments: vec![LayerAlignment {
            logical_layer: 2,
            kind,
            segments: BTreeMap::from([("a".to_string(), a), ("b".to_string(), b)]),
            interface_compatible: kind != LayerKind::Virtual,
        }],
        layer_timeouts: BTreeMap::new(),
        cache_layer: None,
    };
    t.normalize();
    t
}
