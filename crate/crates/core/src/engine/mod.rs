//! Deterministic discrete-event simulation of the failover protocol.
//!
//! Time is virtual: a successful hop costs the target's processing time plus
//! the network delay, a hung target costs the timeout of its layer. Every
//! run owns independent random streams derived from the scenario seed, so
//! results do not depend on run order or thread count.

mod digest;
mod draw;
mod reliability;
mod scenario;
mod sim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use digest::{fnv1a, Fnv1a};
pub use draw::{failure_draw, peer_draw, peer_key, stream, stream_seed, Draw, DEFAULT_DRAW_RANGE};
pub use reliability::{dispatch_with_double_send, update_reliability, Feedback, ReliabilityEstimate};
pub use scenario::{
    load_topology, percentile, run_scenario, Metrics, ProbSpec, Scenario, ScenarioFile, TopologySource, CSV_HEADER,
};
pub use sim::{run_cached_task, run_task, CachedRun, Simulator, TaskRun, TraceEvent, TraceKind};

use crate::analytics::AnalyticsError;
use crate::topology::TopologyError;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("topology has no cache layer")]
    NoCacheLayer,
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// How a source orders untried targets before choosing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    /// Lexicographic by peer id.
    #[default]
    ConfigOrder,
    /// Shuffled per attempt from the run's selection stream.
    UniformRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub runs: u32,
    #[serde(rename = "draw_range_N", alias = "draw_range_n")]
    pub draw_range_n: u64,
    /// Longest the terminal waits on one attempt before re-issuing.
    #[serde(alias = "terminal_timeout_t_require_max")]
    pub t_require_max: Option<f64>,
    pub max_reissues: u32,
    pub selection_policy: SelectionPolicy,
    pub double_sending: bool,
    pub double_send_fanout: usize,
    /// Seconds per hop.
    pub network_delay: f64,
    pub alpha: f64,
    pub theta: f64,
    pub initial_estimate: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            runs: 1000,
            draw_range_n: DEFAULT_DRAW_RANGE,
            t_require_max: None,
            max_reissues: 3,
            selection_policy: SelectionPolicy::ConfigOrder,
            double_sending: false,
            double_send_fanout: 2,
            network_delay: 0.0,
            alpha: 0.1,
            theta: 0.6,
            initial_estimate: 0.5,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |msg: String| Err(EngineError::Config(msg));
        if self.runs == 0 {
            return bad("runs must be >= 1".into());
        }
        if self.draw_range_n < 2 {
            return bad(format!("draw_range_N must be >= 2, got {}", self.draw_range_n));
        }
        if self.double_send_fanout == 0 {
            return bad("double_send_fanout must be >= 1".into());
        }
        if !(self.network_delay.is_finite() && self.network_delay >= 0.0) {
            return bad(format!("network_delay must be >= 0, got {}", self.network_delay));
        }
        if let Some(t) = self.t_require_max {
            if !(t.is_finite() && t > 0.0) {
                return bad(format!("t_require_max must be > 0, got {t}"));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must be in (0, 1), got {}", self.alpha));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad(format!("theta must be in (0, 1), got {}", self.theta));
        }
        if !(0.0..=1.0).contains(&self.initial_estimate) {
            return bad(format!("initial_estimate must be in [0, 1], got {}", self.initial_estimate));
        }
        Ok(())
    }
}
