use std::collections::{BTreeMap, BTreeSet};

use peerweave::analytics::{topology_success_probability, ProbAssignment};
use peerweave::catalog::{self, Figure};
use peerweave::engine::{run_cached_task, run_scenario, run_task, Metrics, Scenario, SimConfig, Simulator, TraceKind};
use peerweave::model::{Outcome, PeerId, Role, SequentialIds, Task, TaskId, Topology};
use peerweave::topology::{build_separate_paths, full_closure, make_full_connection};

fn pid(s: &str) -> PeerId {
    PeerId::new(s).unwrap()
}

fn task() -> Task {
    Task::new(b"work".to_vec(), &mut SequentialIds::new(0))
}

fn config(runs: u32, seed: u64) -> SimConfig {
    SimConfig { runs, seed, ..SimConfig::default() }
}

#[test]
fn clean_chain_takes_one_second_per_layer() {
    let t = build_separate_paths(1, 3, |_, _| 1.0).unwrap();
    let r = run_task(&t, &config(1, 0), &ProbAssignment::from_topology(&t), &task()).unwrap();
    assert_eq!(r.outcome, Outcome::Success);
    assert_eq!(r.return_path, vec![pid("p1l1"), pid("p1l2"), pid("p1l3")]);
    assert_eq!(r.completed_at, 3.0);
}

#[test]
fn hung_entries_fail_after_both_timeouts() {
    let t = build_separate_paths(2, 2, |_, layer| if layer == 1 { 0.0 } else { 1.0 }).unwrap();
    let r = run_task(&t, &config(1, 0), &ProbAssignment::from_topology(&t), &task()).unwrap();
    assert_eq!(r.outcome, Outcome::Failure);
    assert_eq!(r.reason.as_deref(), Some("no-entry-peer"));
    assert_eq!(r.completed_at, t.layer_timeout(1) * 2.0);
    assert_eq!(r.completed_at, 6.0);
}

#[test]
fn two_coin_flip_paths_succeed_three_quarters_of_the_time() {
    let t = build_separate_paths(2, 1, |_, _| 0.5).unwrap();
    let m = run_scenario(&Scenario::from_topology("coins", t, config(10_000, 7))).unwrap();
    assert!((m.success_rate - 0.75).abs() <= 0.02, "{}", m.success_rate);
    assert_eq!(m.counter_s + m.counter_f, 10_000);
}

#[test]
fn grid_scenarios_match_exact_and_reported_values() {
    // A full junction splits the paths into independent stages; the task
    // gets through when every stage has one live chain segment.
    let q: f64 = 0.7;
    let any = |seg: f64, n: i32| 1.0 - (1.0 - seg).powi(n);
    let l23 = any(q, 3) * any(q, 3) * any(q * q, 3);
    let l2 = any(q, 2) * any(q.powi(3), 2);
    for (name, exact, reported) in [("3basic-layer23full", l23, 0.83), ("2basic-layer2full", l2, 0.52)] {
        let e = catalog::find(name).unwrap();
        let a = e.analytic().unwrap();
        assert!((a - exact).abs() < 1e-12, "{name}: {a} vs {exact}");
        let m = run_scenario(&e.scenario(10_000, 7).unwrap()).unwrap();
        assert!((m.success_rate - reported).abs() <= 0.03, "{name}: {}", m.success_rate);
    }
}

#[test]
fn same_seed_same_digest() {
    let e = catalog::find("3basic-layer2full").unwrap();
    let a = run_scenario(&e.scenario(2000, 11).unwrap()).unwrap();
    let b = run_scenario(&e.scenario(2000, 11).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_eq!(Metrics::to_csv_string(std::slice::from_ref(&a)).unwrap(), Metrics::to_csv_string(&[b]).unwrap());
    let c = run_scenario(&e.scenario(2000, 12).unwrap()).unwrap();
    assert_ne!(a.event_trace_digest, c.event_trace_digest);
}

#[test]
fn result_does_not_depend_on_thread_count() {
    let e = catalog::find("4basic-layer23full").unwrap();
    let sc = e.scenario(3000, 5).unwrap();
    let parallel = run_scenario(&sc).unwrap();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| run_scenario(&sc)).unwrap();
    assert_eq!(parallel, single);
}

/// Three layers with timeouts 2, 3 and 5 s and two peers per layer, cache
/// peers at layer `k`.
fn cache_rig(k: u32, cache_p: f64) -> Topology {
    let mut t = full_closure(&build_separate_paths(2, 3, |_, _| 1.0).unwrap()).unwrap();
    t.layer_timeouts = BTreeMap::from([(1, 2.0), (2, 3.0), (3, 5.0)]);
    t.cache_layer = Some(k);
    for p in &mut t.peers {
        if p.layer == k {
            p.role = Role::Cache;
            p.success_prob = cache_p;
        }
    }
    t
}

#[test]
fn cache_layer_sets_the_ack_window() {
    for (k, window) in [(1, 2.0), (2, 5.0)] {
        let t = cache_rig(k, 1.0);
        let run = run_cached_task(&t, &config(1, 0), &ProbAssignment::from_topology(&t), &task()).unwrap();
        assert_eq!(run.ack_window, window);
        assert!(run.run.result.is_success());
        let acked = run.run.acked_at.expect("healthy cache peers acknowledge");
        assert!(acked <= window, "ack at {acked}");
    }
}

#[test]
fn hung_cache_layer_triggers_reissue() {
    let t = cache_rig(1, 0.0);
    let cfg = SimConfig { t_require_max: Some(10.0), max_reissues: 2, ..config(1, 0) };
    let probs = ProbAssignment::from_topology(&t);
    let run = run_cached_task(&t, &cfg, &probs, &task()).unwrap();
    assert_eq!(run.run.attempts, 3);
    assert_eq!(run.run.result.reason.as_deref(), Some("no-cache-ack"));
    assert_eq!(run.run.result.completed_at, 30.0);

    let mut sim = Simulator::new(&t, &probs, &cfg).unwrap().with_cache(&t).unwrap();
    let traced = sim.run_traced(task().id);
    let reissues: Vec<f64> = traced.events.iter().filter(|e| e.kind == TraceKind::Reissue).map(|e| e.at).collect();
    assert_eq!(reissues, vec![10.0, 20.0]);
}

#[test]
fn terminal_timeout_reissues_normal_mode() {
    // Both entries hang for long enough that the terminal gives up first.
    let mut t = build_separate_paths(2, 2, |_, l| if l == 1 { 0.0 } else { 1.0 }).unwrap();
    t.layer_timeouts = BTreeMap::from([(1, 50.0)]);
    let cfg = SimConfig { t_require_max: Some(20.0), max_reissues: 1, ..config(1, 0) };
    let r = run_task(&t, &cfg, &ProbAssignment::from_topology(&t), &task()).unwrap();
    assert_eq!(r.reason.as_deref(), Some("terminal-timeout"));
    assert_eq!(r.completed_at, 40.0);
}

#[test]
fn no_peer_is_dispatched_twice_per_attempt() {
    let t = make_full_connection(&build_separate_paths(3, 4, |_, _| 0.6).unwrap(), &[2, 3, 4]).unwrap();
    let probs = ProbAssignment::from_topology(&t);
    for double_sending in [false, true] {
        let cfg = SimConfig { double_sending, ..config(1, 3) };
        let mut sim = Simulator::new(&t, &probs, &cfg).unwrap();
        for i in 0..300 {
            let run = sim.run_traced(TaskId::simulated(i, 0));
            let mut seen = BTreeSet::new();
            for e in run.events.iter().filter(|e| e.kind == TraceKind::Dispatch) {
                assert!(seen.insert((e.attempt, e.peer.clone())), "run {i}: {:?} dispatched twice", e.peer);
            }
            let path = &run.result.return_path;
            let unique: BTreeSet<_> = path.iter().collect();
            assert_eq!(unique.len(), path.len());
            if run.result.is_success() {
                assert!(t.is_working_path(path), "{path:?}");
            }
        }
    }
}

#[test]
fn empirical_rates_agree_with_exact_values_across_the_catalog() {
    for e in catalog::entries().into_iter().filter(|e| e.figure != Figure::Live) {
        let exact = e.analytic().unwrap();
        let m = run_scenario(&e.scenario(10_000, 7).unwrap()).unwrap();
        let band = 3.0 * Metrics::binomial_sigma(exact, 10_000);
        assert!((m.success_rate - exact).abs() <= band.max(1e-9), "{}: {} vs {exact}", e.name, m.success_rate);
    }
}

#[test]
fn double_sending_never_hurts() {
    for depth in [1, 2, 3] {
        let t = full_closure(&build_separate_paths(4, depth, |_, _| 0.5f64.powf(1.0 / depth as f64)).unwrap()).unwrap();
        let single = run_scenario(&Scenario::from_topology("single", t.clone(), config(10_000, 7))).unwrap();
        let double = SimConfig { double_sending: true, ..config(10_000, 7) };
        let double = run_scenario(&Scenario::from_topology("double", t, double)).unwrap();
        assert!(double.success_rate >= single.success_rate - 0.02);
        assert!(double.mean_task_time <= single.mean_task_time * 1.02);
    }
}

#[test]
fn exact_oracle_handles_every_catalog_entry() {
    for e in catalog::entries() {
        let t = e.topology().unwrap();
        let p = topology_success_probability(&t, &ProbAssignment::from_topology(&t)).unwrap();
        assert!((0.0..=1.0).contains(&p), "{}", e.name);
    }
}
