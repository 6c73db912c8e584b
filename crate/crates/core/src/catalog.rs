//! Built-in experiment scenarios.
//!
//! Four figure groups: path number (basic paths x fully connected layers),
//! coupling (two chains sharing a prefix), layer division and double
//! sending. A fifth group holds small deterministic rigs used to compare
//! live mode against the simulator.

use serde::Serialize;

use crate::analytics::{divide_layer_probability, topology_success_probability, AnalyticsError, ProbAssignment};
use crate::engine::{Scenario, SimConfig};
use crate::model::{PeerId, Topology};
use crate::topology::{build_coupled_pair, build_separate_paths, full_closure, make_full_connection, TopologyError};

/// Per-peer probability used for the path-number grid.
pub const GRID_P: f64 = 0.7;
/// Depth of every basic path in the path-number and coupling grids.
pub const GRID_DEPTH: u32 = 4;
/// Per-peer probability assumed for the coupling grid, whose true value is unknown.
pub const COUPLING_P: f64 = 0.7;
/// Basic-path probability of the division and double-sending rigs.
pub const BASIC_PATH_P: f64 = 0.5;
/// Layers per basic path of the double-sending rig.
pub const DOUBLE_SEND_DEPTH: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Figure {
    PathNumber,
    Coupling,
    Division,
    DoubleSending,
    Live,
}

impl Figure {
    pub const ALL: [Figure; 5] =
        [Figure::PathNumber, Figure::Coupling, Figure::Division, Figure::DoubleSending, Figure::Live];

    pub fn name(self) -> &'static str {
        match self {
            Figure::PathNumber => "path-number",
            Figure::Coupling => "coupling",
            Figure::Division => "division",
            Figure::DoubleSending => "double-sending",
            Figure::Live => "live",
        }
    }
}

/// Parameters that regenerate a catalog topology.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum Generator {
    PathGrid {
        basic_paths: usize,
        depth: u32,
        full_layers: Vec<u32>,
        p: f64,
    },
    Coupling {
        depth: u32,
        common: u32,
        p: f64,
        p_known: bool,
    },
    Division {
        basic_paths: usize,
        layers: u32,
        path_prob: f64,
    },
    DoubleSending {
        basic_paths: usize,
        depth: u32,
        path_prob: f64,
        enabled: bool,
    },
    /// Two chains; `hung` peers get p = 0, all others p = 1.
    LiveRig {
        chains: usize,
        depth: u32,
        full: bool,
        hung: Vec<String>,
    },
}

/// What a reported number measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    SuccessRate,
    MeanTaskTime,
}

/// A previously reported number and the words it was reported with.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reported {
    pub measure: Measure,
    pub value: f64,
    pub quote: &'static str,
    /// False when the value depends on parameters that cannot be recovered.
    pub reproducible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CatalogEntry {
    pub name: String,
    pub figure: Figure,
    pub generator: Generator,
    pub reported: Vec<Reported>,
}

impl CatalogEntry {
    pub fn topology(&self) -> Result<Topology, TopologyError> {
        match &self.generator {
            Generator::PathGrid { basic_paths, depth, full_layers, p } => {
                make_full_connection(&build_separate_paths(*basic_paths, *depth, |_, _| *p)?, full_layers)
            }
            Generator::Coupling { depth, common, p, .. } => build_coupled_pair(*depth, *common, *p),
            Generator::Division { basic_paths, layers, path_prob } => {
                let q = divide_layer_probability(*path_prob, *layers)?;
                full_closure(&build_separate_paths(*basic_paths, *layers, |_, _| q)?)
            }
            Generator::DoubleSending { basic_paths, depth, path_prob, .. } => {
                let q = divide_layer_probability(*path_prob, *depth)?;
                full_closure(&build_separate_paths(*basic_paths, *depth, |_, _| q)?)
            }
            Generator::LiveRig { chains, depth, full, hung } => {
                let t = build_separate_paths(*chains, *depth, |_, _| 1.0)?;
                let mut t = if *full { full_closure(&t)? } else { t };
                for peer in &mut t.peers {
                    if hung.iter().any(|h| h == peer.id.as_str()) {
                        peer.success_prob = 0.0;
                    }
                }
                Ok(t)
            }
        }
    }

    pub fn sim_config(&self, runs: u32, seed: u64) -> SimConfig {
        let double_sending = matches!(self.generator, Generator::DoubleSending { enabled: true, .. });
        SimConfig { runs, seed, double_sending, ..SimConfig::default() }
    }

    pub fn scenario(&self, runs: u32, seed: u64) -> Result<Scenario, TopologyError> {
        let topology = self.topology()?;
        Ok(Scenario::from_topology(self.name.clone(), topology, self.sim_config(runs, seed)))
    }

    /// Exact success probability of the entry's topology.
    pub fn analytic(&self) -> Result<f64, AnalyticsError> {
        let t = self.topology()?;
        topology_success_probability(&t, &ProbAssignment::from_topology(&t))
    }

    pub fn reported(&self, measure: Measure) -> Option<&Reported> {
        self.reported.iter().find(|r| r.measure == measure)
    }

    /// True when every peer is certainly up or certainly hung.
    pub fn is_deterministic(&self) -> bool {
        self.topology().map(|t| t.peers.iter().all(|p| p.success_prob == 0.0 || p.success_prob == 1.0)).unwrap_or(false)
    }
}

fn success(value: f64, quote: &'static str) -> Reported {
    Reported { measure: Measure::SuccessRate, value, quote, reproducible: true }
}

fn time(value: f64, quote: &'static str) -> Reported {
    Reported { measure: Measure::MeanTaskTime, value, quote, reproducible: false }
}

const CONNECTIONS: [(&str, &[u32]); 4] =
    [("separate", &[]), ("layer2full", &[2]), ("layer23full", &[2, 3]), ("layer234full", &[2, 3, 4])];

fn path_grid_reports(basic_paths: usize, connection: &str) -> Vec<Reported> {
    const BY_PATHS: &str = "0.52, 0.70, and 0.81";
    const BY_LAYERS: &str = "0.56, 0.70, 0.83, 0.90";
    const TIMES: &str = "5.70, 7.86, 6.92, and 5.20 seconds";
    let mut out = Vec::new();
    match (basic_paths, connection) {
        (2, "layer2full") => out.push(success(0.52, BY_PATHS)),
        (3, "layer2full") => out.push(success(0.70, BY_PATHS)),
        (4, "layer2full") => out.push(success(0.81, BY_PATHS)),
        (3, "separate") => out.push(success(0.56, BY_LAYERS)),
        (3, "layer23full") => out.push(success(0.83, BY_LAYERS)),
        (3, "layer234full") => out.push(success(0.90, BY_LAYERS)),
        _ => {}
    }
    if basic_paths == 4 {
        let t = match connection {
            "separate" => 5.70,
            "layer2full" => 7.86,
            "layer23full" => 6.92,
            _ => 5.20,
        };
        out.push(time(t, TIMES));
    }
    out
}

/// Every built-in scenario, grouped by figure.
pub fn entries() -> Vec<CatalogEntry> {
    let mut out = Vec::new();
    for basic_paths in [2, 3, 4] {
        for (connection, layers) in CONNECTIONS {
            out.push(CatalogEntry {
                name: format!("{basic_paths}basic-{connection}"),
                figure: Figure::PathNumber,
                generator: Generator::PathGrid {
                    basic_paths,
                    depth: GRID_DEPTH,
                    full_layers: layers.to_vec(),
                    p: GRID_P,
                },
                reported: path_grid_reports(basic_paths, connection),
            });
        }
    }
    let coupling = [0.32, 0.299, 0.302, 0.304];
    for (common, value) in coupling.into_iter().enumerate() {
        out.push(CatalogEntry {
            name: format!("coupling-{common}common"),
            figure: Figure::Coupling,
            generator: Generator::Coupling { depth: GRID_DEPTH, common: common as u32, p: COUPLING_P, p_known: false },
            reported: vec![Reported {
                measure: Measure::SuccessRate,
                value,
                quote: "0.32 ... 0.299, 0.302, 0.304",
                reproducible: false,
            }],
        });
    }
    let division = [(1, 0.937, None), (2, 0.992, Some(2.26)), (4, 0.996, Some(4.28)), (8, 1.0, Some(5.05))];
    for (layers, value, t) in division {
        let mut reported = vec![success(value, "0.937, 0.992, 0.996, and 1.0")];
        if let Some(t) = t {
            reported.push(time(t, "from 2.26 seconds (2layer case) to 4.28 seconds (4layer case) ... to 5.05 seconds"));
        }
        out.push(CatalogEntry {
            name: format!("division-{layers}layer"),
            figure: Figure::Division,
            generator: Generator::Division { basic_paths: 4, layers, path_prob: BASIC_PATH_P },
            reported,
        });
    }
    for (name, enabled, t) in [("no-double-sending", false, 9.24), ("double-sending", true, 4.15)] {
        out.push(CatalogEntry {
            name: name.into(),
            figure: Figure::DoubleSending,
            generator: Generator::DoubleSending {
                basic_paths: 4,
                depth: DOUBLE_SEND_DEPTH,
                path_prob: BASIC_PATH_P,
                enabled,
            },
            reported: vec![time(t, "9.24 and 4.15 seconds")],
        });
    }
    let live = [
        ("live-clean", false, vec![]),
        ("live-sibling-failover", true, vec!["p1l2"]),
        ("live-no-entry", false, vec!["p1l1", "p2l1"]),
        ("live-dead-end", false, vec!["p1l2", "p2l2"]),
    ];
    for (name, full, hung) in live {
        out.push(CatalogEntry {
            name: name.into(),
            figure: Figure::Live,
            generator: Generator::LiveRig {
                chains: 2,
                depth: 2,
                full,
                hung: hung.into_iter().map(String::from).collect(),
            },
            reported: Vec::new(),
        });
    }
    out
}

pub fn find(name: &str) -> Option<CatalogEntry> {
    entries().into_iter().find(|e| e.name == name)
}

pub fn by_figure(figure: Figure) -> Vec<CatalogEntry> {
    entries().into_iter().filter(|e| e.figure == figure).collect()
}

/// Peer id helper for catalog-generated names such as `p1l2`.
pub fn grid_peer(path: usize, layer: u32) -> PeerId {
    PeerId::new(format!("p{path}l{layer}")).expect("valid id")
}
