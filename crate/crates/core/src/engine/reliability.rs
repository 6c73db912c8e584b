//! Source-held reliability estimates and double sending.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SimConfig;
use crate::model::{Endpoint, PeerId};

/// What a source learned about one dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    Success,
    Timeout,
}

/// Exponential moving average toward 1 on success and toward 0 on timeout.
pub fn update_reliability(estimate: f64, outcome: Feedback, alpha: f64) -> f64 {
    let next = match outcome {
        Feedback::Success => estimate + alpha * (1.0 - estimate),
        Feedback::Timeout => estimate - alpha * estimate,
    };
    next.clamp(0.0, 1.0)
}

/// Per (source, target) success estimates. Each source only ever reads and
/// writes its own rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityEstimate {
    pub alpha: f64,
    pub theta: f64,
    /// Estimate assumed for a target never dispatched to.
    pub initial: f64,
    table: BTreeMap<Endpoint, BTreeMap<PeerId, f64>>,
}

impl ReliabilityEstimate {
    pub fn new(alpha: f64, theta: f64, initial: f64) -> Self {
        ReliabilityEstimate { alpha, theta, initial, table: BTreeMap::new() }
    }

    pub fn from_config(config: &SimConfig) -> Self {
        Self::new(config.alpha, config.theta, config.initial_estimate)
    }

    pub fn get(&self, source: &Endpoint, target: &PeerId) -> f64 {
        self.table.get(source).and_then(|row| row.get(target)).copied().unwrap_or(self.initial)
    }

    pub fn set(&mut self, source: Endpoint, target: PeerId, estimate: f64) {
        self.table.entry(source).or_default().insert(target, estimate.clamp(0.0, 1.0));
    }

    pub fn record(&mut self, source: &Endpoint, target: &PeerId, outcome: Feedback) -> f64 {
        let next = update_reliability(self.get(source, target), outcome, self.alpha);
        self.set(source.clone(), target.clone(), next);
        next
    }

    pub fn is_established(&self, source: &Endpoint, target: &PeerId) -> bool {
        self.get(source, target) >= self.theta
    }
}

/// Positions in `estimates` to dispatch to, in dispatch order.
///
/// Without double sending, or when every candidate is established, only the
/// best candidate is chosen: highest estimate, earliest position on ties.
/// Otherwise the best is joined by the probationary candidates (estimate
/// below `theta`) in position order until `fanout` is reached.
pub(crate) fn choose(estimates: &[f64], theta: f64, double_sending: bool, fanout: usize, out: &mut Vec<usize>) {
    out.clear();
    if estimates.is_empty() {
        return;
    }
    let mut best = 0;
    for (i, &e) in estimates.iter().enumerate().skip(1) {
        if e > estimates[best] {
            best = i;
        }
    }
    out.push(best);
    if !double_sending || estimates.iter().all(|&e| e >= theta) {
        return;
    }
    for (i, &e) in estimates.iter().enumerate() {
        if out.len() >= fanout.max(1) {
            break;
        }
        if i != best && e < theta {
            out.push(i);
        }
    }
}

/// Targets `source` sends to among `candidates` (already in selection order).
pub fn dispatch_with_double_send(
    source: &Endpoint,
    candidates: &[PeerId],
    estimates: &ReliabilityEstimate,
    config: &SimConfig,
) -> Vec<PeerId> {
    let values: Vec<f64> = candidates.iter().map(|c| estimates.get(source, c)).collect();
    let mut picked = Vec::new();
    choose(&values, estimates.theta, config.double_sending, config.double_send_fanout, &mut picked);
    picked.into_iter().map(|i| candidates[i].clone()).collect()
}
