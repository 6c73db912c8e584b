//! The event loop.
//!
//! Each peer that processes a task opens a frame holding its pending
//! dispatches. A frame refills only once all of its dispatches have come
//! back (timed out or reported exhausted); with nothing left to try it
//! reports itself exhausted to its parent frame. Frame 0 is the terminal.
//!
//! A peer is dispatched at most once per attempt, so an attempt ends after
//! at most one dispatch per peer, and it succeeds exactly when some working
//! path has every peer up.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::digest::Fnv1a;
use super::draw::{peer_draw, peer_key, stream, Draw};
use super::reliability::{choose, update_reliability, Feedback};
use super::{EngineError, SelectionPolicy, SimConfig};
use crate::analytics::{terminal_wait_with_cache, ProbAssignment, TimingAssignment};
use crate::model::{PeerId, Task, TaskId, TaskResult, Topology};
use crate::topology::CompiledTopology;

const ROOT: u32 = 0;
const SELECTION_KEY: u64 = 0x005e_1ec7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Dispatch,
    Processed,
    Timeout,
    Exhausted,
    CacheAck,
    Returned,
    Failed,
    Reissue,
}

/// One entry of a traced run. `source` is `None` for the terminal.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEvent {
    pub attempt: u32,
    pub at: f64,
    pub kind: TraceKind,
    pub source: Option<PeerId>,
    pub peer: Option<PeerId>,
}

/// Everything observed about one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRun {
    pub result: TaskResult,
    /// Attempts made, the first included.
    pub attempts: u32,
    /// When the terminal received a cache acknowledgment, in cache mode.
    pub acked_at: Option<f64>,
    pub digest: u64,
    /// Filled only by traced runs.
    pub events: Vec<TraceEvent>,
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    Processed { parent: u32, peer: u32 },
    Timeout { frame: u32, peer: u32 },
    ChildFailed { frame: u32, peer: u32 },
    CacheAck,
    Returned { frame: u32 },
}

#[derive(Debug, Clone, Copy)]
struct Queued {
    at: f64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        self.at.total_cmp(&other.at).then(self.seq.cmp(&other.seq))
    }
}

#[derive(Debug, Clone, Copy)]
struct Frame {
    /// `u32::MAX` for the terminal.
    peer: u32,
    parent: u32,
    outstanding: u32,
}

enum End {
    Success {
        at: f64,
        frame: u32,
    },
    Failure {
        at: f64,
        reason: &'static str,
    },
    /// The attempt outlived the terminal's patience.
    Abandoned,
}

/// A topology compiled for repeated runs, with reusable buffers.
pub struct Simulator {
    c: CompiledTopology,
    p: Vec<f64>,
    keys: Vec<u64>,
    config: SimConfig,
    cache_layer: Option<u32>,
    ack_window: f64,

    queue: BinaryHeap<Reverse<Queued>>,
    seq: u64,
    frames: Vec<Frame>,
    /// 0 unknown, 1 up, 2 hang; per attempt.
    draws: Vec<u8>,
    claimed: Vec<bool>,
    hung: Vec<bool>,
    /// Row 0 is the terminal, row `i + 1` peer `i`.
    estimates: Vec<f64>,
    candidates: Vec<usize>,
    candidate_estimates: Vec<f64>,
    picked: Vec<usize>,
    selection: Option<ChaCha8Rng>,
    task: TaskId,
    attempt: u32,
    offset: f64,
    acked_at: Option<f64>,
    digest: Fnv1a,
    trace: Option<Vec<TraceEvent>>,
}

impl Simulator {
    pub fn new(topology: &Topology, probs: &ProbAssignment, config: &SimConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let c = CompiledTopology::new(topology)?;
        let p = c.ids.iter().map(|id| probs.get(id)).collect::<Result<Vec<_>, _>>()?;
        let keys = c.ids.iter().map(peer_key).collect();
        let n = c.len();
        Ok(Simulator {
            keys,
            p,
            config: config.clone(),
            cache_layer: None,
            ack_window: 0.0,
            queue: BinaryHeap::with_capacity(2 * n + 4),
            seq: 0,
            frames: Vec::with_capacity(n + 1),
            draws: vec![0; n],
            claimed: vec![false; n],
            hung: vec![false; n],
            estimates: vec![config.initial_estimate; (n + 1) * n],
            candidates: Vec::with_capacity(n),
            candidate_estimates: Vec::with_capacity(n),
            picked: Vec::with_capacity(n),
            selection: None,
            task: TaskId::from_u128(0),
            attempt: 0,
            offset: 0.0,
            acked_at: None,
            digest: Fnv1a::new(),
            trace: None,
            c,
        })
    }

    /// Turns on cache-layer semantics using the topology's `cache_layer`.
    pub fn with_cache(mut self, topology: &Topology) -> Result<Self, EngineError> {
        let k = topology.cache_layer.ok_or(EngineError::NoCacheLayer)?;
        let timing = TimingAssignment { layer_timeouts: topology.resolved_timeouts(), ..Default::default() };
        self.ack_window = terminal_wait_with_cache(&timing, k)?;
        self.cache_layer = Some(k);
        Ok(self)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Terminal wait for a cache acknowledgment, zero outside cache mode.
    pub fn ack_window(&self) -> f64 {
        self.ack_window
    }

    pub fn run(&mut self, task: TaskId) -> TaskRun {
        self.run_inner(task, false)
    }

    /// Like [`Simulator::run`], also recording every event.
    pub fn run_traced(&mut self, task: TaskId) -> TaskRun {
        self.run_inner(task, true)
    }

    fn run_inner(&mut self, task: TaskId, traced: bool) -> TaskRun {
        self.task = task;
        self.offset = 0.0;
        self.acked_at = None;
        self.digest = Fnv1a::new();
        self.trace = traced.then(Vec::new);
        self.estimates.fill(self.config.initial_estimate);
        let mut attempt = 0;
        let result = loop {
            self.attempt = attempt;
            let end = self.run_attempt();
            let patience = self.patience();
            let reissue_at = match end {
                End::Success { at, frame } => {
                    let path = self.path_of(frame);
                    self.log(at, TraceKind::Returned, None, None);
                    break TaskResult::success(task, path, self.offset + at);
                }
                End::Failure { at, reason } => {
                    self.log(at, TraceKind::Failed, None, None);
                    break TaskResult::failure(task, reason, self.offset + at);
                }
                End::Abandoned => patience.expect("abandoned attempts have a deadline"),
            };
            if attempt >= self.config.max_reissues {
                let reason = if self.cache_layer.is_some() { "no-cache-ack" } else { "terminal-timeout" };
                self.log(reissue_at, TraceKind::Failed, None, None);
                break TaskResult::failure(task, reason, self.offset + reissue_at);
            }
            self.log(reissue_at, TraceKind::Reissue, None, None);
            self.offset += reissue_at;
            attempt += 1;
        };
        TaskRun {
            result,
            attempts: attempt + 1,
            acked_at: self.acked_at,
            digest: self.digest.finish(),
            events: self.trace.take().unwrap_or_default(),
        }
    }

    /// When the terminal re-issues an unanswered attempt.
    fn patience(&self) -> Option<f64> {
        match self.cache_layer {
            Some(_) => Some(self.config.t_require_max.unwrap_or(self.ack_window).max(self.ack_window)),
            None => self.config.t_require_max,
        }
    }

    fn run_attempt(&mut self) -> End {
        self.queue.clear();
        self.seq = 0;
        self.frames.clear();
        self.frames.push(Frame { peer: u32::MAX, parent: ROOT, outstanding: 0 });
        self.draws.fill(0);
        self.claimed.fill(false);
        self.hung.fill(false);
        self.selection = match self.config.selection_policy {
            SelectionPolicy::ConfigOrder => None,
            SelectionPolicy::UniformRandom => Some(stream(self.config.seed, self.task, self.attempt, SELECTION_KEY)),
        };
        let mut acked = false;
        if let Some(end) = self.refill(ROOT, 0.0) {
            return end;
        }
        // In cache mode the terminal gives up once the ack window passes;
        // otherwise only `t_require_max` bounds an attempt.
        let deadline = if self.cache_layer.is_some() { Some(self.ack_window) } else { self.config.t_require_max };
        while let Some(Reverse(Queued { at, ev, .. })) = self.queue.pop() {
            if let Some(d) = deadline {
                if at > d && !acked {
                    return End::Abandoned;
                }
            }
            let end = match ev {
                Ev::Processed { parent, peer } => self.on_processed(at, parent, peer),
                Ev::Timeout { frame, peer } => {
                    self.hung[peer as usize] = true;
                    self.log(at, TraceKind::Timeout, self.frame_peer(frame), Some(peer));
                    self.child_done(at, frame)
                }
                Ev::ChildFailed { frame, peer } => {
                    self.log(at, TraceKind::Exhausted, self.frame_peer(frame), Some(peer));
                    self.child_done(at, frame)
                }
                Ev::CacheAck => {
                    if self.acked_at.is_none() {
                        self.acked_at = Some(self.offset + at);
                        self.log(at, TraceKind::CacheAck, None, None);
                    }
                    acked = true;
                    // With an ack in hand only t_require_max would bound the attempt.
                    None
                }
                Ev::Returned { frame } => Some(End::Success { at, frame }),
            };
            if let Some(end) = end {
                if let (Some(d), End::Failure { at, .. }) = (deadline, &end) {
                    if self.cache_layer.is_some() && !acked && *at <= d {
                        // Nothing reached the cache layer; the terminal still waits out its window.
                        return End::Abandoned;
                    }
                }
                return end;
            }
        }
        unreachable!("the root frame always resolves an attempt")
    }

    fn frame_peer(&self, frame: u32) -> Option<u32> {
        let peer = self.frames[frame as usize].peer;
        (peer != u32::MAX).then_some(peer)
    }

    fn push(&mut self, at: f64, ev: Ev) {
        self.seq += 1;
        self.queue.push(Reverse(Queued { at, seq: self.seq, ev }));
    }

    fn draw(&mut self, peer: usize) -> Draw {
        if self.draws[peer] == 0 {
            let d = peer_draw(
                self.config.seed,
                self.task,
                self.attempt,
                self.keys[peer],
                self.p[peer],
                self.config.draw_range_n,
            );
            self.draws[peer] = if d == Draw::Up { 1 } else { 2 };
        }
        if self.draws[peer] == 1 {
            Draw::Up
        } else {
            Draw::Hang
        }
    }

    fn on_processed(&mut self, at: f64, parent: u32, peer: u32) -> Option<End> {
        let frame = self.frames.len() as u32;
        self.frames.push(Frame { peer, parent, outstanding: 0 });
        self.log(at, TraceKind::Processed, self.frame_peer(parent), Some(peer));
        let delay = self.config.network_delay;
        if self.c.is_final[peer as usize] {
            self.push(at + delay, Ev::Returned { frame });
            return None;
        }
        if self.cache_layer == Some(self.c.layer[peer as usize]) {
            self.push(at + delay, Ev::CacheAck);
        }
        self.refill(frame, at)
    }

    fn child_done(&mut self, at: f64, frame: u32) -> Option<End> {
        let f = &mut self.frames[frame as usize];
        f.outstanding -= 1;
        if f.outstanding > 0 {
            return None;
        }
        self.refill(frame, at)
    }

    /// Dispatches the frame's next batch, or reports it exhausted.
    fn refill(&mut self, frame: u32, at: f64) -> Option<End> {
        let source = self.frames[frame as usize].peer;
        self.candidates.clear();
        let pool: &[usize] = if source == u32::MAX { &self.c.entries } else { &self.c.targets[source as usize] };
        self.candidates.extend(pool.iter().copied().filter(|&t| !self.claimed[t]));
        if let Some(rng) = self.selection.as_mut() {
            self.candidates.shuffle(rng);
        }
        if self.candidates.is_empty() {
            return self.exhausted(frame, at);
        }
        let n = self.c.len();
        let row = if source == u32::MAX { 0 } else { (source as usize + 1) * n };
        if frame == ROOT && self.cache_layer.is_some() {
            // The terminal always reaches for several cache peers at once.
            let fanout = self.config.double_send_fanout.max(2).min(self.candidates.len());
            self.picked.clear();
            self.picked.extend(0..fanout);
        } else {
            self.candidate_estimates.clear();
            for &t in &self.candidates {
                self.candidate_estimates.push(self.estimates[row + t]);
            }
            choose(
                &self.candidate_estimates,
                self.config.theta,
                self.config.double_sending,
                self.config.double_send_fanout,
                &mut self.picked,
            );
        }
        let delay = self.config.network_delay;
        for i in 0..self.picked.len() {
            let target = self.candidates[self.picked[i]];
            self.claimed[target] = true;
            self.frames[frame as usize].outstanding += 1;
            self.log(at, TraceKind::Dispatch, self.frame_peer(frame), Some(target as u32));
            let feedback = match self.draw(target) {
                Draw::Up => {
                    let done = at + delay + self.c.processing_time[target];
                    self.push(done, Ev::Processed { parent: frame, peer: target as u32 });
                    Feedback::Success
                }
                Draw::Hang => {
                    self.push(at + self.c.timeout[target], Ev::Timeout { frame, peer: target as u32 });
                    Feedback::Timeout
                }
            };
            let e = &mut self.estimates[row + target];
            *e = update_reliability(*e, feedback, self.config.alpha);
        }
        None
    }

    fn exhausted(&mut self, frame: u32, at: f64) -> Option<End> {
        if frame == ROOT {
            let reason =
                if self.c.entries.iter().all(|&e| self.hung[e]) { "no-entry-peer" } else { "all-paths-exhausted" };
            return Some(End::Failure { at, reason });
        }
        let f = self.frames[frame as usize];
        self.push(at + self.config.network_delay, Ev::ChildFailed { frame: f.parent, peer: f.peer });
        None
    }

    fn path_of(&self, mut frame: u32) -> Vec<PeerId> {
        let mut path = Vec::new();
        while frame != ROOT {
            let f = self.frames[frame as usize];
            path.push(self.c.ids[f.peer as usize].clone());
            frame = f.parent;
        }
        path.reverse();
        path
    }

    fn log(&mut self, at: f64, kind: TraceKind, source: Option<u32>, peer: Option<u32>) {
        let d = &mut self.digest;
        d.write_u32(self.attempt);
        d.write_f64(self.offset + at);
        d.write_u8(kind as u8);
        d.write_u32(source.unwrap_or(u32::MAX));
        d.write_u32(peer.unwrap_or(u32::MAX));
        if let Some(trace) = self.trace.as_mut() {
            let id = |i: Option<u32>| i.map(|i| self.c.ids[i as usize].clone());
            trace.push(TraceEvent {
                attempt: self.attempt,
                at: self.offset + at,
                kind,
                source: id(source),
                peer: id(peer),
            });
        }
    }
}

/// Runs one task to completion.
pub fn run_task(
    topology: &Topology,
    config: &SimConfig,
    probs: &ProbAssignment,
    task: &Task,
) -> Result<TaskResult, EngineError> {
    let mut sim = Simulator::new(topology, probs, config)?;
    Ok(sim.run(task.id).result)
}

/// Outcome of a task submitted through a cache layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedRun {
    /// Longest the terminal waits for an acknowledgment.
    pub ack_window: f64,
    pub run: TaskRun,
}

/// Runs one task through the topology's cache layer: the terminal sends to
/// several entry peers, waits at most the ack window for a cache peer to
/// acknowledge, then leaves retries to the cache layer. Without an ack it
/// re-issues after `t_require_max` (or the ack window when unset).
pub fn run_cached_task(
    topology: &Topology,
    config: &SimConfig,
    probs: &ProbAssignment,
    task: &Task,
) -> Result<CachedRun, EngineError> {
    let mut sim = Simulator::new(topology, probs, config)?.with_cache(topology)?;
    let run = sim.run(task.id);
    Ok(CachedRun { ack_window: sim.ack_window(), run })
}
