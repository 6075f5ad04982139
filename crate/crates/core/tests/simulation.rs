use std::collections::{BTreeMap, BTreeSet};

use hybrid_bft::checker::{self, CheckKind};
use hybrid_bft::netsim::{self, SimError};
use hybrid_bft::scenario::{AdversaryMode, DelayDist, Gst};
use hybrid_bft::trace::{EpochEntry, MsgClass, TraceEvent};
use hybrid_bft::types::CertKind;
use hybrid_bft::{Epoch, ReplicaId, ScenarioConfig, SchemeKind, Trace};

fn base(n: usize, f: usize) -> ScenarioConfig {
    ScenarioConfig { n, f, epochs: 12, signature_scheme: SchemeKind::TestMac, ..Default::default() }
}

fn run(cfg: &ScenarioConfig) -> Trace {
    netsim::run(cfg).expect("simulation").trace
}

fn passes(trace: &Trace, kinds: &[CheckKind]) {
    let report = checker::run_checks(trace, kinds).unwrap();
    for v in &report.verdicts {
        assert!(v.passed, "{v}");
    }
}

fn commits_by_replica(trace: &Trace) -> BTreeMap<ReplicaId, Vec<u64>> {
    let mut out: BTreeMap<ReplicaId, Vec<u64>> = BTreeMap::new();
    for r in &trace.records {
        if let (Some(id), TraceEvent::Commit { height, .. }) = (r.replica, &r.event) {
            out.entry(id).or_default().push(*height);
        }
    }
    out
}

fn epoch_starts(trace: &Trace, r: ReplicaId) -> Vec<(u64, Epoch)> {
    trace
        .by_replica(r)
        .filter_map(|x| match x.event {
            TraceEvent::EpochStart { epoch, .. } => Some((x.time, epoch)),
            _ => None,
        })
        .collect()
}

#[test]
fn failure_free_run_commits_every_epoch_everywhere() {
    let mut c = base(4, 0);
    c.epochs = 20;
    let t = run(&c);
    let commits = commits_by_replica(&t);
    assert_eq!(commits.len(), 4);
    for heights in commits.values() {
        assert_eq!(heights, &(1..=20).collect::<Vec<u64>>());
    }
    passes(&t, &CheckKind::ALL);
}

#[test]
fn seed_42_is_byte_identical_across_runs() {
    let c = ScenarioConfig { seed: 42, ..base(5, 2) };
    assert_eq!(run(&c).to_ndjson(), run(&c).to_ndjson());
    let other = ScenarioConfig { seed: 43, ..c };
    assert_ne!(run(&other).to_ndjson(), run(&ScenarioConfig { seed: 42, ..other.clone() }).to_ndjson());
}

#[test]
fn silent_leader_epoch_ends_with_silence_certificate_in_time() {
    for fast in [false, true] {
        let c = ScenarioConfig {
            byzantine: vec![3],
            adversary: AdversaryMode::SilentLeader,
            fast_path: fast,
            ..base(5, 2)
        };
        let t = run(&c);
        let meta = t.meta().unwrap().clone();
        let bound = meta.delta_l + 7 * meta.delta_s;
        let mut seen = false;
        for r in meta.honest() {
            let starts = epoch_starts(&t, r);
            let start3 = starts.iter().find(|(_, e)| *e == 3).expect("epoch 3 reached").0;
            let next = starts.iter().find(|(_, e)| *e >= 4).expect("epoch 4 reached").0;
            assert!(next - start3 <= bound, "{r} spent {} us in epoch 3", next - start3);
            seen |=
                t.by_replica(r).any(|x| matches!(x.event, TraceEvent::Cert { cert: CertKind::Silence, epoch: 3, .. }));
        }
        assert!(seen, "no silence certificate for the silent epoch");
        passes(&t, &CheckKind::ALL);
    }
}

#[test]
fn equivocating_leader_is_caught_and_never_decided() {
    // Fixed delays: both halves get their proposal at the same moment, so
    // every honest replica sees both leader votes before any commit timer
    // expires. With random large-message delays a replica may instead
    // receive the other half's certificate first, never vote, and let the
    // first half commit safely.
    let mut c =
        ScenarioConfig { byzantine: vec![1], adversary: AdversaryMode::Equivocate, fast_path: true, ..base(4, 1) };
    c.delays.small = DelayDist::Fixed { ms: 10.0 };
    c.delays.large = DelayDist::Fixed { ms: 50.0 };
    let t = run(&c);
    let meta = t.meta().unwrap().clone();
    let byz_epochs: BTreeSet<Epoch> = (0..meta.epochs).filter(|e| e % 4 == 1).collect();
    for r in meta.honest() {
        for x in t.by_replica(r) {
            if let TraceEvent::Decision { epoch, .. } = x.event {
                assert!(!byz_epochs.contains(&epoch), "{r} decided Byzantine epoch {epoch}");
            }
        }
        let caught: BTreeSet<Epoch> = t
            .by_replica(r)
            .filter_map(|x| match x.event {
                TraceEvent::Cert { cert: CertKind::Equiv, epoch, .. } => Some(epoch),
                _ => None,
            })
            .collect();
        assert_eq!(caught, byz_epochs, "{r}");
    }
    passes(&t, &CheckKind::ALL);
}

#[test]
fn regular_path_equivocation_run_passes_lock_invariant() {
    let c = ScenarioConfig { byzantine: vec![2], adversary: AdversaryMode::Equivocate, ..base(5, 2) };
    let t = run(&c);
    let v = CheckKind::LockInvariant.run(&t).unwrap();
    assert!(v.passed, "{v}");
    passes(&t, &CheckKind::ALL);
}

#[test]
fn crashed_replicas_do_not_stop_commits() {
    let mut c = ScenarioConfig { byzantine: vec![0, 3], adversary: AdversaryMode::Crash, ..base(5, 2) };
    c.adversary_params.crash_at_ms = 700.0;
    let t = run(&c);
    let crashes = t.records.iter().filter(|r| matches!(r.event, TraceEvent::Crash)).count();
    assert_eq!(crashes, 2);
    passes(&t, &CheckKind::ALL);
}

#[test]
fn suppressed_large_messages_stall_liveness_but_not_safety() {
    let mut c = ScenarioConfig { gst: Gst::NEVER, horizon_ms: Some(8_000.0), ..base(4, 1) };
    c.delays.large_pre_gst = DelayDist::Never;
    let t = run(&c);
    assert!(!t.is_complete());
    assert!(t.records.iter().any(|r| matches!(r.event, TraceEvent::Held { .. })));
    let live = CheckKind::Liveness.run(&t).unwrap();
    assert!(!live.passed);
    passes(&t, &[CheckKind::Safety, CheckKind::LockInvariant, CheckKind::Validity, CheckKind::EpochSync]);
}

#[test]
fn decisions_can_precede_block_arrival() {
    let mut c = ScenarioConfig { gst: Gst::NEVER, seed: 8, ..base(5, 2) };
    c.delays.large_pre_gst = DelayDist::Uniform { lo_ms: 1.0, hi_ms: 1500.0 };
    let t = run(&c);
    let mut decided = BTreeSet::new();
    let mut deferred = 0;
    for r in &t.records {
        match (&r.event, r.replica) {
            (TraceEvent::Decision { block, .. }, Some(id)) => {
                decided.insert((id, *block));
            }
            (TraceEvent::Store { block }, Some(id)) if decided.contains(&(id, *block)) => deferred += 1,
            _ => {}
        }
    }
    assert!(deferred > 0);
    passes(&t, &[CheckKind::Availability, CheckKind::Safety, CheckKind::Validity]);
}

#[test]
fn regular_latency_approaches_twice_delta_s_as_delays_vanish() {
    let mut c = ScenarioConfig { start_stagger: Some(0.0), ..base(5, 2) };
    c.delays.small = DelayDist::Fixed { ms: 0.001 };
    c.delays.large = DelayDist::Fixed { ms: 0.001 };
    let m = checker::metrics(&run(&c)).unwrap();
    let mean = m.latency.mean_ms.unwrap();
    assert!((mean - 200.0).abs() < 0.01, "{mean}");
}

#[test]
fn regular_latency_does_not_depend_on_block_size() {
    let mut means = Vec::new();
    for size in [1usize << 10, 1 << 14, 1 << 17, 1 << 20] {
        let mut c = ScenarioConfig {
            start_stagger: Some(0.0),
            block_payload_size: size,
            small_threshold: 512,
            epochs: 6,
            ..base(4, 1)
        };
        c.delays.small = DelayDist::Fixed { ms: 10.0 };
        c.delays.large = DelayDist::Fixed { ms: 50.0 };
        means.push(checker::metrics(&run(&c)).unwrap().latency.mean_ms.unwrap());
    }
    assert!(means.iter().all(|m| (m - 260.0).abs() < 1e-9), "{means:?}");
}

#[test]
fn deliveries_respect_class_bounds() {
    let c = ScenarioConfig { gst: Gst::At(1500.0), ..base(5, 2) };
    let t = run(&c);
    let meta = t.meta().unwrap().clone();
    let gst = meta.gst.unwrap();
    let mut counted = [0, 0];
    for r in &t.records {
        if let TraceEvent::Deliver { class, sent_at, .. } = r.event {
            let d = r.time - sent_at;
            assert!(d > 0);
            match class {
                MsgClass::S => {
                    counted[0] += 1;
                    assert!(d <= meta.delta_s);
                }
                MsgClass::L => {
                    counted[1] += 1;
                    assert!(r.time <= sent_at.max(gst) + meta.delta_l);
                }
            }
        }
    }
    assert!(counted[0] > 0 && counted[1] > 0);
    passes(&t, &[CheckKind::Bounds]);
}

#[test]
fn stress_mode_violations_are_caught_by_bounds_audit() {
    let mut c = base(4, 1);
    c.delays.small_violation_rate = 0.05;
    let t = netsim::run(&c).map(|o| o.trace).or_else(|e| match e {
        SimError::Stalled { trace, .. } => Ok(*trace),
        other => Err(other),
    });
    let t = t.unwrap();
    assert!(!CheckKind::Bounds.run(&t).unwrap().passed);
}

#[test]
fn start_offsets_stay_within_stagger() {
    let c = base(7, 3);
    let t = run(&c);
    let meta = t.meta().unwrap().clone();
    let firsts: Vec<u64> = (0..7).map(|i| epoch_starts(&t, ReplicaId(i))[0].0).collect();
    assert!(firsts.iter().all(|&s| s <= meta.start_stagger));
    assert!(t
        .records
        .iter()
        .filter(|r| matches!(r.event, TraceEvent::EpochStart { epoch: 0, .. }))
        .all(|r| matches!(r.event, TraceEvent::EpochStart { entry: EpochEntry::Normal, .. })));
}

#[test]
fn trace_survives_ndjson_round_trip_with_same_verdicts() {
    let c = ScenarioConfig { byzantine: vec![1], adversary: AdversaryMode::Equivocate, ..base(4, 1) };
    let t = run(&c);
    let back = Trace::read_ndjson(&t.to_ndjson()[..]).unwrap();
    assert_eq!(back, t);
    assert_eq!(checker::run_checks(&t, &CheckKind::ALL).unwrap(), checker::run_checks(&back, &CheckKind::ALL).unwrap());
}

#[test]
fn too_many_byzantine_replicas_rejected() {
    let c = ScenarioConfig { byzantine: vec![0, 1, 2], ..base(5, 2) };
    assert!(matches!(netsim::run(&c), Err(SimError::Config(_))));
    let c = ScenarioConfig { n: 4, f: 2, ..Default::default() };
    assert!(c.validate().is_err());
    let c = ScenarioConfig { n: 4, f: 1, ..Default::default() };
    assert!(c.validate().is_ok());
}
