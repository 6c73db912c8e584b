//! Live mode: each peer is an actor with its own loopback listener and only
//! its own configuration. Peers talk the wire protocol over one TCP
//! connection per hop:
//!
//! ```text
//! source                      target
//!   | -- task_forward -------> |
//!   | <------------------ ack  |   (hung targets never ack)
//!   |        ... target processes and forwards downstream ...
//!   | <-- result_return        |   success, carrying the return path
//!   | <-- error_report         |   or exhaustion, carrying the tried set
//! ```
//!
//! Dispatch order, failure draws and the tried-set rules match the
//! simulator, so for a given seed both produce the same outcomes and return
//! paths. Wall-clock time replaces virtual time, scaled by `time_scale`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::codec::{decode, encode, Body, ErrorBody, WireMessage};
use super::TransportError;
use crate::analytics::ProbAssignment;
use crate::engine::{peer_draw, peer_key, Draw, Fnv1a, Metrics, SimConfig, DEFAULT_DRAW_RANGE};
use crate::model::{Endpoint, PeerId, Task, TaskId, TaskResult, Topology};

/// Longest frame a peer will buffer; longer lines are discarded.
pub const MAX_FRAME: usize = 1 << 20;
/// Floor on every acknowledgment wait, so scheduling jitter is not read as a hang.
pub const MIN_ACK_WAIT: Duration = Duration::from_millis(50);

fn default_draw_range() -> u64 {
    DEFAULT_DRAW_RANGE
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub id: PeerId,
    pub address: String,
}

/// Everything one peer knows: itself and its targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerConfig {
    pub id: PeerId,
    pub layer: u32,
    pub p: f64,
    pub processing_time_s: f64,
    pub targets: Vec<TargetConfig>,
    /// Wait for a target's acknowledgment.
    pub t_max_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_draw_range", rename = "draw_range_N")]
    pub draw_range_n: u64,
    /// Multiplier from configured seconds to wall-clock seconds.
    #[serde(default = "default_scale")]
    pub time_scale: f64,
}

fn scaled(seconds: f64, scale: f64) -> Duration {
    Duration::from_secs_f64((seconds * scale).max(0.0))
}

fn ack_wait(t_max_s: f64, scale: f64) -> Duration {
    scaled(t_max_s, scale).max(MIN_ACK_WAIT)
}

/// Reads one `\n`-terminated line. `Ok(None)` on a clean EOF; oversized
/// lines are skipped.
fn read_frame<R: BufRead>(reader: &mut R) -> io::Result<Option<Vec<u8>>> {
    loop {
        let mut line = Vec::new();
        let n = io::Read::take(&mut *reader, MAX_FRAME as u64 + 1).read_until(b'\n', &mut line)?;
        if n == 0 {
            return Ok(None);
        }
        if line.last() == Some(&b'\n') {
            return Ok(Some(line));
        }
        if line.len() <= MAX_FRAME {
            // EOF in the middle of a frame.
            return Ok(Some(line));
        }
        // Drop the rest of an oversized line.
        let mut sink = Vec::new();
        reader.read_until(b'\n', &mut sink)?;
    }
}

fn send(stream: &mut TcpStream, message: &WireMessage) -> io::Result<()> {
    stream.write_all(&encode(message))?;
    stream.flush()
}

/// How one hop ended, from the source's point of view.
#[derive(Debug)]
enum Hop {
    /// No acknowledgment in time, connection refused or dropped.
    Hung,
    Done(TaskResult),
    Exhausted(BTreeSet<PeerId>),
    /// The terminal's overall deadline passed while waiting.
    Deadline,
}

fn forward(sender: &Endpoint, address: &str, task: &Task, ack: Duration, deadline: Option<Instant>) -> Hop {
    let Ok(addr) = address.parse::<SocketAddr>() else {
        warn!("{sender}: unusable target address {address}");
        return Hop::Hung;
    };
    let Ok(mut stream) = TcpStream::connect_timeout(&addr, ack) else {
        return Hop::Hung;
    };
    let _ = stream.set_nodelay(true);
    let message = WireMessage::new(task.id, sender.clone(), Body::TaskForward(task.clone()));
    if send(&mut stream, &message).is_err() {
        return Hop::Hung;
    }
    let Ok(read_half) = stream.try_clone() else {
        return Hop::Hung;
    };
    let mut reader = BufReader::new(read_half);
    let mut acked = false;
    loop {
        let wait = if acked {
            match deadline {
                Some(d) => match d.checked_duration_since(Instant::now()) {
                    Some(left) if !left.is_zero() => Some(left),
                    _ => return Hop::Deadline,
                },
                None => None,
            }
        } else {
            Some(ack)
        };
        if stream.set_read_timeout(wait).is_err() {
            return Hop::Hung;
        }
        let frame = match read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => return Hop::Hung,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                let _ = stream.shutdown(Shutdown::Both);
                return if acked { Hop::Deadline } else { Hop::Hung };
            }
            Err(_) => return Hop::Hung,
        };
        let Ok(reply) = decode(&frame) else {
            continue;
        };
        if reply.task_id != task.id {
            continue;
        }
        match reply.body {
            Body::Ack => acked = true,
            Body::ResultReturn(result) if acked => return Hop::Done(result),
            Body::ErrorReport(e) if acked => return Hop::Exhausted(e.tried),
            _ => {}
        }
    }
}

struct PeerState {
    config: PeerConfig,
    stop: AtomicBool,
}

impl PeerState {
    fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    fn handle(&self, stream: TcpStream) {
        let me = Endpoint::Peer(self.config.id.clone());
        let Ok(read_half) = stream.try_clone() else { return };
        let mut reader = BufReader::new(read_half);
        let mut stream = stream;
        let mut task = loop {
            let frame = match read_frame(&mut reader) {
                Ok(Some(f)) => f,
                _ => return,
            };
            match decode(&frame) {
                Ok(WireMessage { body: Body::TaskForward(task), .. }) => break task,
                Ok(_) => {}
                Err(e) => {
                    debug!("{me}: dropping frame: {e}");
                    let report = ErrorBody { reason: format!("malformed-frame: {e}"), tried: BTreeSet::new() };
                    let reply = WireMessage::new(TaskId::from_u128(0), me.clone(), Body::ErrorReport(report));
                    if send(&mut stream, &reply).is_err() {
                        return;
                    }
                }
            }
        };
        if self.stopped() {
            return;
        }
        let c = &self.config;
        let draw = peer_draw(c.seed, task.id, task.attempt, peer_key(&c.id), c.p, c.draw_range_n);
        if draw == Draw::Hang {
            debug!("{me}: hanging on {}", task.id);
            // Hold the connection without answering until the source gives up.
            let _ = stream.set_read_timeout(None);
            while let Ok(Some(_)) = read_frame(&mut reader) {}
            return;
        }
        if send(&mut stream, &WireMessage::new(task.id, me.clone(), Body::Ack)).is_err() {
            return;
        }
        thread::sleep(scaled(c.processing_time_s, c.time_scale));
        if self.stopped() {
            return;
        }
        if task.append_signature(c.id.clone(), c.layer).is_err() {
            warn!("{me}: refusing to sign {} twice", task.id);
            return;
        }
        let reply = match self.forward_downstream(&me, &mut task) {
            Some(result) => Body::ResultReturn(result),
            None => {
                let mut tried = task.tried.clone();
                tried.insert(c.id.clone());
                Body::ErrorReport(ErrorBody { reason: "all-paths-exhausted".into(), tried })
            }
        };
        let _ = send(&mut stream, &WireMessage::new(task.id, me, reply));
    }

    fn forward_downstream(&self, me: &Endpoint, task: &mut Task) -> Option<TaskResult> {
        let c = &self.config;
        if c.targets.is_empty() {
            return Some(TaskResult::success(task.id, task.path(), 0.0));
        }
        let mut targets: Vec<&TargetConfig> = c.targets.iter().collect();
        targets.sort_by(|a, b| a.id.cmp(&b.id));
        let ack = ack_wait(c.t_max_s, c.time_scale);
        loop {
            let on_trace = |id: &PeerId| task.trace.iter().any(|s| &s.peer == id);
            let next = targets.iter().find(|t| !task.tried.contains(&t.id) && !on_trace(&t.id))?;
            if self.stopped() {
                return None;
            }
            match forward(me, &next.address, task, ack, None) {
                Hop::Done(result) => return Some(result),
                Hop::Exhausted(tried) => {
                    task.tried.extend(tried);
                    task.tried.insert(next.id.clone());
                }
                Hop::Hung | Hop::Deadline => {
                    task.tried.insert(next.id.clone());
                }
            }
        }
    }
}

/// A running peer actor.
pub struct LivePeer {
    id: PeerId,
    addr: SocketAddr,
    state: Arc<PeerState>,
    accept: Option<JoinHandle<()>>,
}

impl LivePeer {
    /// Starts serving `config` on an already bound listener.
    pub fn spawn(config: PeerConfig, listener: TcpListener) -> Result<LivePeer, TransportError> {
        let addr = listener.local_addr().map_err(|e| TransportError::Launch(e.to_string()))?;
        let id = config.id.clone();
        let state = Arc::new(PeerState { config, stop: AtomicBool::new(false) });
        let shared = Arc::clone(&state);
        let accept = thread::Builder::new()
            .name(format!("peer-{id}"))
            .spawn(move || {
                for conn in listener.incoming() {
                    if shared.stopped() {
                        break;
                    }
                    let Ok(conn) = conn else { continue };
                    let _ = conn.set_nodelay(true);
                    let worker = Arc::clone(&shared);
                    if thread::Builder::new().spawn(move || worker.handle(conn)).is_err() {
                        warn!("{}: cannot spawn connection handler", shared.config.id);
                    }
                }
            })
            .map_err(|e| TransportError::Launch(e.to_string()))?;
        Ok(LivePeer { id, addr, state, accept: Some(accept) })
    }

    pub fn id(&self) -> &PeerId {
        &self.id
    }

    pub fn address(&self) -> SocketAddr {
        self.addr
    }

    pub fn config(&self) -> &PeerConfig {
        &self.state.config
    }

    /// Stops the peer: the listener closes, so new connections are refused,
    /// and in-flight handlers abandon their tasks.
    pub fn kill(&mut self) {
        if self.state.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the accept loop so it sees the flag and drops the listener.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(handle) = self.accept.take() {
            let _ = handle.join();
        }
    }

    pub fn is_killed(&self) -> bool {
        self.state.stopped()
    }
}

impl Drop for LivePeer {
    fn drop(&mut self) {
        self.kill();
    }
}

/// Settings for a live session.
#[derive(Debug, Clone, PartialEq)]
pub struct LiveOptions {
    /// Peers bind `base_port + i` in id order; `None` lets the OS choose.
    pub base_port: Option<u16>,
    pub time_scale: f64,
    pub seed: u64,
    pub draw_range_n: u64,
    pub t_require_max: Option<f64>,
    pub max_reissues: u32,
}

impl Default for LiveOptions {
    fn default() -> Self {
        LiveOptions::from_sim(&SimConfig::default())
    }
}

impl LiveOptions {
    pub fn from_sim(config: &SimConfig) -> Self {
        LiveOptions {
            base_port: None,
            time_scale: 0.01,
            seed: config.seed,
            draw_range_n: config.draw_range_n,
            t_require_max: config.t_require_max,
            max_reissues: config.max_reissues,
        }
    }
}

/// One live peer per topology peer plus the terminal logic.
pub struct LiveNetwork {
    peers: BTreeMap<PeerId, LivePeer>,
    entries: Vec<TargetConfig>,
    entry_timeout: f64,
    options: LiveOptions,
}

impl LiveNetwork {
    pub fn launch(topology: &Topology, probs: &ProbAssignment, options: &LiveOptions) -> Result<Self, TransportError> {
        let mut specs: Vec<_> = topology.peers.iter().collect();
        specs.sort_by(|a, b| a.id.cmp(&b.id));
        let mut listeners = BTreeMap::new();
        for (i, spec) in specs.iter().enumerate() {
            let port = match options.base_port {
                Some(base) => base
                    .checked_add(i as u16)
                    .ok_or_else(|| TransportError::Launch(format!("port range overflows at {}", spec.id)))?,
                None => 0,
            };
            let addr = SocketAddr::from(([127, 0, 0, 1], port));
            let listener = TcpListener::bind(addr).map_err(|source| TransportError::Bind {
                peer: spec.id.clone(),
                addr,
                source,
            })?;
            listeners.insert(spec.id.clone(), listener);
        }
        let mut addresses = BTreeMap::new();
        for (id, l) in &listeners {
            let addr = l.local_addr().map_err(|e| TransportError::Launch(e.to_string()))?;
            addresses.insert(id.clone(), addr.to_string());
        }
        let target_config = |id: &PeerId| TargetConfig { id: id.clone(), address: addresses[id].clone() };
        let mut peers = BTreeMap::new();
        for spec in specs {
            let targets: Vec<_> = topology.targets_of(&spec.id).into_iter().map(target_config).collect();
            let t_max_s = topology
                .targets_of(&spec.id)
                .first()
                .and_then(|t| topology.layer_of(t))
                .map_or(0.0, |l| topology.layer_timeout(l));
            let config = PeerConfig {
                id: spec.id.clone(),
                layer: spec.layer,
                p: probs.get(&spec.id)?,
                processing_time_s: spec.processing_time,
                targets,
                t_max_s,
                seed: options.seed,
                draw_range_n: options.draw_range_n,
                time_scale: options.time_scale,
            };
            let listener = listeners.remove(&spec.id).expect("bound above");
            peers.insert(spec.id.clone(), LivePeer::spawn(config, listener)?);
        }
        let mut entries: Vec<_> = topology.terminal_targets.iter().map(target_config).collect();
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(LiveNetwork { peers, entries, entry_timeout: topology.layer_timeout(1), options: options.clone() })
    }

    pub fn peer(&self, id: &PeerId) -> Option<&LivePeer> {
        self.peers.get(id)
    }

    pub fn peer_configs(&self) -> Vec<PeerConfig> {
        self.peers.values().map(|p| p.config().clone()).collect()
    }

    /// Stops one peer; returns false for an unknown id.
    pub fn kill(&mut self, id: &PeerId) -> bool {
        match self.peers.get_mut(id) {
            Some(p) => {
                p.kill();
                true
            }
            None => false,
        }
    }

    /// Submits a task from the terminal and waits for its outcome.
    /// `completed_at` is wall-clock seconds divided by the time scale.
    pub fn submit(&self, task: Task) -> TaskResult {
        let start = Instant::now();
        let scale = self.options.time_scale;
        let elapsed = || start.elapsed().as_secs_f64() / scale;
        let ack = ack_wait(self.entry_timeout, scale);
        let mut task = task;
        loop {
            let deadline = self.options.t_require_max.map(|t| Instant::now() + scaled(t, scale));
            let mut hung = BTreeSet::new();
            let outcome = loop {
                let next = self.entries.iter().find(|e| !task.tried.contains(&e.id));
                let Some(next) = next else {
                    let reason = if self.entries.iter().all(|e| hung.contains(&e.id)) {
                        "no-entry-peer"
                    } else {
                        "all-paths-exhausted"
                    };
                    break Some(TaskResult::failure(task.id, reason, 0.0));
                };
                if deadline.is_some_and(|d| Instant::now() >= d) {
                    break None;
                }
                match forward(&Endpoint::Terminal, &next.address, &task, ack, deadline) {
                    Hop::Done(mut result) => {
                        result.task_id = task.id;
                        break Some(result);
                    }
                    Hop::Exhausted(tried) => {
                        task.tried.extend(tried);
                        task.tried.insert(next.id.clone());
                    }
                    Hop::Hung => {
                        hung.insert(next.id.clone());
                        task.tried.insert(next.id.clone());
                    }
                    Hop::Deadline => break None,
                }
            };
            match outcome {
                Some(mut result) => {
                    result.completed_at = elapsed();
                    return result;
                }
                None if task.attempt < self.options.max_reissues => task = task.reissued(),
                None => return TaskResult::failure(task.id, "terminal-timeout", elapsed()),
            }
        }
    }
}

/// Digest of outcomes and return paths, in run order. Live timings vary
/// from run to run, so unlike the simulator's event digest this one
/// ignores time.
pub fn outcome_digest(results: &[TaskResult]) -> u64 {
    let mut h = Fnv1a::new();
    for r in results {
        h.write_u8(r.is_success() as u8);
        for p in &r.return_path {
            h.write(p.as_str().as_bytes());
            h.write_u8(0);
        }
        h.write(r.reason.as_deref().unwrap_or("").as_bytes());
        h.write_u8(0xff);
    }
    h.finish()
}

/// Launches the topology live, submits `config.runs` tasks one at a time
/// (run `i` uses task id `(i, 0)`, as in the simulator) and tears it down.
pub fn live_run(
    name: &str,
    topology: &Topology,
    probs: &ProbAssignment,
    config: &SimConfig,
    options: &LiveOptions,
) -> Result<(Metrics, Vec<TaskResult>), TransportError> {
    config.validate().map_err(|e| TransportError::Launch(e.to_string()))?;
    let network = LiveNetwork::launch(topology, probs, options)?;
    let results: Vec<TaskResult> = (0..config.runs as u64)
        .map(|i| {
            let task = Task {
                id: TaskId::simulated(i, 0),
                payload: Default::default(),
                trace: Vec::new(),
                tried: BTreeSet::new(),
                attempt: 0,
            };
            network.submit(task)
        })
        .collect();
    let metrics = Metrics::from_results(name, config.seed, &results, outcome_digest(&results));
    Ok((metrics, results))
}
