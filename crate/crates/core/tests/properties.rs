mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use common::{aligned_rig, build, pid, shape_strategy};
use peerweave::analytics::{
    inclusion_exclusion_probability, layered_success_probability, topology_success_probability,
    union_success_probability, ProbAssignment,
};
use peerweave::engine::{update_reliability, Feedback, SimConfig, Simulator};
use peerweave::model::{Endpoint, LayerKind, Payload, Signature, Task, TaskId, TaskResult};
use peerweave::topology::{
    build_coupled_pair, compute_switch_path, enumerate_working_paths, full_closure, validate_topology,
};
use peerweave::transport::{decode, encode, Body, ErrorBody, WireMessage};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn generated_topologies_are_valid(shape in shape_strategy(4, 3)) {
        let t = build(&shape);
        let report = validate_topology(&t);
        prop_assert!(report.is_valid(), "{}", report);
    }

    #[test]
    fn exact_oracles_agree(shape in shape_strategy(4, 3)) {
        let t = build(&shape);
        let probs = ProbAssignment::from_topology(&t);
        let paths = enumerate_working_paths(&t).unwrap();
        let states = union_success_probability(&paths, &probs).unwrap();
        let layered = layered_success_probability(&t, &probs).unwrap();
        prop_assert!((states - layered).abs() < 1e-12, "{states} vs {layered}");
        if paths.len() <= 12 {
            let ie = inclusion_exclusion_probability(&paths, &probs).unwrap();
            prop_assert!((states - ie).abs() < 1e-12, "{states} vs {ie}");
        }
    }

    #[test]
    fn raising_a_probability_never_hurts(shape in shape_strategy(4, 3), pick in any::<prop::sample::Index>(), bump in 0.0f64..=1.0) {
        let t = build(&shape);
        let mut probs = ProbAssignment::from_topology(&t);
        let before = topology_success_probability(&t, &probs).unwrap();
        let peer = t.peers[pick.index(t.peers.len())].id.clone();
        let p = probs.get(&peer).unwrap();
        probs.set(peer, p + (1.0 - p) * bump).unwrap();
        let after = topology_success_probability(&t, &probs).unwrap();
        prop_assert!(after >= before - 1e-12);
    }

    #[test]
    fn full_connection_never_hurts(shape in shape_strategy(4, 3)) {
        let t = build(&shape);
        let probs = ProbAssignment::from_topology(&t);
        let full = full_closure(&t).unwrap();
        let a = topology_success_probability(&t, &probs).unwrap();
        let b = topology_success_probability(&full, &probs).unwrap();
        prop_assert!(b >= a - 1e-12);
    }

    #[test]
    fn separate_paths_beat_coupled_ones(depth in 2u32..=6, p in 0.01f64..0.99) {
        let separate = build_coupled_pair(depth, 0, p).unwrap();
        let base = topology_success_probability(&separate, &ProbAssignment::from_topology(&separate)).unwrap();
        for common in 1..depth {
            let t = build_coupled_pair(depth, common, p).unwrap();
            let coupled = topology_success_probability(&t, &ProbAssignment::from_topology(&t)).unwrap();
            prop_assert!(base >= coupled - 1e-12, "{common} common: {coupled} > {base}");
        }
    }

    #[test]
    fn simulator_finds_a_path_whenever_one_is_up(shape in shape_strategy(4, 3), seed in any::<u64>()) {
        // With p in {0, 1} the failover search must be complete.
        let mut shape = shape;
        for layer in &mut shape.layers {
            for p in layer.iter_mut() {
                *p = if *p < 0.4 { 0.0 } else { 1.0 };
            }
        }
        let t = build(&shape);
        let probs = ProbAssignment::from_topology(&t);
        let exact = topology_success_probability(&t, &probs).unwrap();
        let config = SimConfig { seed, ..SimConfig::default() };
        let mut sim = Simulator::new(&t, &probs, &config).unwrap();
        let run = sim.run(TaskId::simulated(0, 0));
        prop_assert_eq!(run.result.is_success(), exact == 1.0);
        if run.result.is_success() {
            prop_assert!(t.is_working_path(&run.result.return_path));
        }
    }

    #[test]
    fn enhanced_switch_length(n in 2usize..=5) {
        let t = aligned_rig(LayerKind::Enhanced, n, 1);
        let mut context = vec![pid("d")];
        context.extend((1..n).map(|i| pid(&format!("a{i}"))));
        let failed = pid(&format!("a{n}"));
        let sp = compute_switch_path(&t, &failed, &context, &BTreeSet::new()).unwrap();
        prop_assert_eq!(sp.len_switch, n + 2);
        prop_assert_eq!(sp.decision_point(), Some(&pid("d")));
    }

    #[test]
    fn virtual_switch_length(k in 1usize..=4, l in 1usize..=4) {
        let t = aligned_rig(LayerKind::Virtual, k + 1, l + 1);
        prop_assert!(validate_topology(&t).is_valid());
        let mut context = vec![pid("d")];
        context.extend((1..=k).map(|i| pid(&format!("a{i}"))));
        let failed = pid(&format!("a{}", k + 1));
        let sp = compute_switch_path(&t, &failed, &context, &BTreeSet::new()).unwrap();
        prop_assert_eq!(sp.len_switch, k + l + 3);
    }

    #[test]
    fn codec_round_trips(
        payload in prop::collection::vec(any::<u8>(), 0..256),
        id in any::<u128>(),
        trace in prop::collection::vec("p[a-z0-9_-]{0,8}", 0..5),
        attempt in 0u32..4,
        reason in "\\PC{0,20}",
    ) {
        let task = Task {
            id: TaskId::from_u128(id),
            payload: Payload(payload),
            trace: trace.iter().enumerate().map(|(i, p)| Signature { peer: pid(p), layer: i as u32 + 1 }).collect(),
            tried: trace.iter().map(|p| pid(p)).collect(),
            attempt,
        };
        let sender = trace.first().map_or(Endpoint::Terminal, |p| Endpoint::Peer(pid(p)));
        let bodies = [
            Body::TaskForward(task.clone()),
            Body::ResultReturn(TaskResult::success(task.id, task.path(), 1.5)),
            Body::ResultReturn(TaskResult::failure(task.id, reason.clone(), 0.25)),
            Body::Ack,
            Body::ErrorReport(ErrorBody { reason, tried: task.tried.clone() }),
        ];
        for body in bodies {
            let m = WireMessage::new(task.id, sender.clone(), body);
            let bytes = encode(&m);
            prop_assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 1);
            prop_assert_eq!(decode(&bytes).unwrap(), m);
        }
    }

    #[test]
    fn estimates_stay_in_bounds(start in 0.0f64..=1.0, alpha in 0.001f64..0.999, outcomes in prop::collection::vec(any::<bool>(), 0..100)) {
        let mut est = start;
        for up in outcomes {
            let next = update_reliability(est, if up { Feedback::Success } else { Feedback::Timeout }, alpha);
            prop_assert!((0.0..=1.0).contains(&next));
            if up { prop_assert!(next >= est) } else { prop_assert!(next <= est) }
            est = next;
        }
    }
}
