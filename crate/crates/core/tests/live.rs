use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::time::Duration;

use peerweave::analytics::ProbAssignment;
use peerweave::catalog;
use peerweave::engine::{SimConfig, Simulator};
use peerweave::model::{Endpoint, PeerId, Task, TaskId};
use peerweave::topology::{build_separate_paths, full_closure};
use peerweave::transport::{
    decode, encode, live_run, Body, LiveNetwork, LiveOptions, PeerConfig, TransportError, WireMessage, MAX_FRAME,
};

fn pid(s: &str) -> PeerId {
    PeerId::new(s).unwrap()
}

fn task(i: u64) -> Task {
    Task {
        id: TaskId::simulated(i, 0),
        payload: Default::default(),
        trace: Vec::new(),
        tried: Default::default(),
        attempt: 0,
    }
}

#[test]
fn live_matches_simulator_with_random_failures() {
    let e = catalog::find("3basic-layer2full").unwrap();
    let sc = e.scenario(25, 4).unwrap();
    let (metrics, live) = live_run(&e.name, &sc.topology, &sc.probs, &sc.sim, &LiveOptions::from_sim(&sc.sim)).unwrap();
    let mut sim = Simulator::new(&sc.topology, &sc.probs, &sc.sim).unwrap();
    for (i, l) in live.iter().enumerate() {
        let s = sim.run(TaskId::simulated(i as u64, 0)).result;
        assert_eq!((s.outcome, &s.return_path, &s.reason), (l.outcome, &l.return_path, &l.reason), "run {i}");
    }
    assert_eq!(metrics.runs, 25);
    assert!(metrics.counter_s > 0 && metrics.counter_f > 0, "{metrics:?}");
}

#[test]
fn killed_peer_behaves_like_a_hung_one() {
    let t = full_closure(&build_separate_paths(2, 2, |_, _| 1.0).unwrap()).unwrap();
    let probs = ProbAssignment::from_topology(&t);
    let options = LiveOptions::from_sim(&SimConfig::default());
    let mut net = LiveNetwork::launch(&t, &probs, &options).unwrap();
    for i in 0..3 {
        let r = net.submit(task(i));
        assert_eq!(r.return_path, vec![pid("p1l1"), pid("p1l2")]);
    }
    assert!(net.kill(&pid("p1l2")));
    assert!(net.peer(&pid("p1l2")).unwrap().is_killed());

    let mut degraded = probs.clone();
    degraded.set(pid("p1l2"), 0.0).unwrap();
    let mut sim = Simulator::new(&t, &degraded, &SimConfig::default()).unwrap();
    for i in 3..8 {
        let live = net.submit(task(i));
        let expected = sim.run(TaskId::simulated(i, 0)).result;
        assert!(live.is_success());
        assert_eq!(live.return_path, expected.return_path);
        assert_eq!(live.return_path, vec![pid("p1l1"), pid("p2l2")]);
    }
}

#[test]
fn hung_entries_report_no_entry_peer() {
    let e = catalog::find("live-no-entry").unwrap();
    let sc = e.scenario(3, 0).unwrap();
    let (m, results) = live_run(&e.name, &sc.topology, &sc.probs, &sc.sim, &LiveOptions::from_sim(&sc.sim)).unwrap();
    assert_eq!(m.counter_f, 3);
    assert!(results.iter().all(|r| r.reason.as_deref() == Some("no-entry-peer")));
}

fn read_reply(reader: &mut BufReader<TcpStream>) -> WireMessage {
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line).unwrap();
    decode(&line).unwrap()
}

#[test]
fn peers_survive_noise_on_the_wire() {
    let t = build_separate_paths(1, 1, |_, _| 1.0).unwrap();
    let net = LiveNetwork::launch(&t, &ProbAssignment::from_topology(&t), &LiveOptions::default()).unwrap();
    let addr = net.peer(&pid("p1l1")).unwrap().address();
    let mut stream = TcpStream::connect(addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());

    stream.write_all(b"GET / HTTP/1.1\n").unwrap();
    match read_reply(&mut reader).body {
        Body::ErrorReport(e) => assert!(e.reason.starts_with("malformed-frame"), "{}", e.reason),
        other => panic!("unexpected reply {other:?}"),
    }
    let mut huge = vec![b'x'; MAX_FRAME + 10];
    huge.push(b'\n');
    stream.write_all(&huge).unwrap();

    let t = task(9);
    stream.write_all(&encode(&WireMessage::new(t.id, Endpoint::Terminal, Body::TaskForward(t.clone())))).unwrap();
    assert_eq!(read_reply(&mut reader).body, Body::Ack);
    match read_reply(&mut reader).body {
        Body::ResultReturn(r) => assert_eq!(r.return_path, vec![pid("p1l1")]),
        other => panic!("unexpected reply {other:?}"),
    }
}

#[test]
fn peer_config_parses_the_documented_shape() {
    let text = r#"{
        "id": "p1l1", "layer": 1, "p": 0.7, "processing_time_s": 1.0,
        "targets": [{"id": "p1l2", "address": "127.0.0.1:9001"}],
        "t_max_s": 3.0
    }"#;
    let c: PeerConfig = serde_json::from_str(text).unwrap();
    assert_eq!(c.targets[0].id, pid("p1l2"));
    assert_eq!(c.time_scale, 1.0);
    assert!(serde_json::from_str::<PeerConfig>(&text.replace("\"layer\"", "\"tier\"")).is_err());
}

#[test]
fn taken_port_is_a_bind_error() {
    let holder = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = holder.local_addr().unwrap().port();
    let t = build_separate_paths(1, 1, |_, _| 1.0).unwrap();
    let options = LiveOptions { base_port: Some(port), ..LiveOptions::default() };
    match LiveNetwork::launch(&t, &ProbAssignment::from_topology(&t), &options) {
        Err(TransportError::Bind { peer, .. }) => assert_eq!(peer, pid("p1l1")),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("bound an occupied port"),
    }
}
