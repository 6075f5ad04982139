//! Checks against small hand-written traces.

use base64::Engine;
use hybrid_bft::app::seeded_payload;
use hybrid_bft::checker::{check_epoch_sync, check_lock_invariant, check_safety, check_validity, CheckKind};
use hybrid_bft::trace::{EpochEntry, EpochState, RunMeta, TraceEvent, TraceRecord};
use hybrid_bft::{Block, BlockId, Epoch, ReplicaId, Trace};

const MS: u64 = 1000;

fn meta(n: usize) -> RunMeta {
    RunMeta {
        n,
        f: (n - 1) / 2,
        byzantine: vec![],
        adversary: "none".into(),
        delta_s: 100 * MS,
        delta_l: 500 * MS,
        gst: Some(0),
        start_stagger: 100 * MS,
        small_threshold: 4096,
        epochs: 2,
        fast_path: false,
        seed: 0,
    }
}

struct Builder {
    records: Vec<TraceRecord>,
}

impl Builder {
    fn new(n: usize) -> Self {
        Builder { records: vec![TraceRecord { time: 0, replica: None, event: TraceEvent::Meta(meta(n)) }] }
    }

    fn at(&mut self, time: u64, r: u32, event: TraceEvent) -> &mut Self {
        self.records.push(TraceRecord { time, replica: Some(ReplicaId(r)), event });
        self
    }

    fn block(&mut self, b: &Block) -> &mut Self {
        let payload = base64::engine::general_purpose::STANDARD.encode(b.payload());
        self.records.push(TraceRecord {
            time: 0,
            replica: None,
            event: TraceEvent::Block { block: b.id(), prev: b.prev(), payload },
        });
        self
    }

    fn done(&mut self) -> Trace {
        self.records.push(TraceRecord {
            time: 10_000 * MS,
            replica: None,
            event: TraceEvent::End { complete: true, reason: "all replicas halted".into() },
        });
        Trace::new(std::mem::take(&mut self.records))
    }
}

fn chain() -> (Block, Block) {
    let b0 = Block::new(seeded_payload(64, 0, 0, ReplicaId(0)), None);
    let b1 = Block::new(seeded_payload(64, 0, 1, ReplicaId(1)), Some(b0.id()));
    (b0, b1)
}

fn commit(e: Epoch, b: &Block, height: u64) -> TraceEvent {
    TraceEvent::Commit { epoch: e, block: b.id(), height, prev: b.prev(), direct: true }
}

/// Three replicas that all start, lock, decide and commit epochs 0 and 1.
fn good() -> Builder {
    let (b0, b1) = chain();
    let mut t = Builder::new(3);
    t.block(&b0).block(&b1);
    for r in 0..3u32 {
        let off = r as u64 * 10 * MS;
        t.at(off, r, TraceEvent::EpochStart { epoch: 0, entry: EpochEntry::Normal })
            .at(off + 1, r, TraceEvent::Store { block: b0.id() })
            .at(200 * MS + off, r, TraceEvent::Lock { cert_epoch: 0, block: b0.id(), in_epoch: 0 })
            .at(200 * MS + off, r, TraceEvent::EpochStart { epoch: 1, entry: EpochEntry::Normal })
            .at(210 * MS + off, r, TraceEvent::Store { block: b1.id() })
            .at(300 * MS + off, r, TraceEvent::Lock { cert_epoch: 1, block: b1.id(), in_epoch: 1 })
            .at(300 * MS + off, r, TraceEvent::EpochStart { epoch: 2, entry: EpochEntry::Halt })
            .at(400 * MS + off, r, TraceEvent::StateChange { epoch: 0, state: EpochState::Committed })
            .at(400 * MS + off, r, TraceEvent::Decision { epoch: 0, block: b0.id() })
            .at(400 * MS + off, r, commit(0, &b0, 1))
            .at(500 * MS + off, r, TraceEvent::StateChange { epoch: 1, state: EpochState::Committed })
            .at(500 * MS + off, r, TraceEvent::Decision { epoch: 1, block: b1.id() })
            .at(500 * MS + off, r, commit(1, &b1, 2));
    }
    t
}

#[test]
fn hand_built_trace_passes_every_protocol_check() {
    let t = good().done();
    for k in [
        CheckKind::Safety,
        CheckKind::EpochSync,
        CheckKind::LockInvariant,
        CheckKind::Availability,
        CheckKind::Validity,
        CheckKind::Bounds,
    ] {
        let v = k.run(&t).unwrap();
        assert!(v.passed, "{v}");
        assert!(v.checked > 0 || k == CheckKind::Bounds, "{v}");
    }
}

#[test]
fn conflicting_commits_are_located() {
    let (b0, _) = chain();
    let other = Block::new(seeded_payload(64, 9, 0, ReplicaId(0)), None);
    let mut t = good();
    t.block(&other);
    for rec in t.records.iter_mut() {
        if rec.replica == Some(ReplicaId(2)) {
            if let TraceEvent::Commit { block, height: 1, .. } = &mut rec.event {
                *block = other.id();
            }
        }
    }
    let v = check_safety(&t.done()).unwrap();
    assert!(!v.passed);
    let hit = v.violations.iter().find(|x| x.height == Some(1)).expect("height located");
    assert!(hit.blocks.contains(&b0.id()) && hit.blocks.contains(&other.id()), "{hit}");
    assert!(hit.replicas.contains(&ReplicaId(2)), "{hit}");
}

#[test]
fn late_epoch_start_is_located() {
    let mut t = good();
    for rec in t.records.iter_mut() {
        if rec.replica == Some(ReplicaId(1)) && matches!(rec.event, TraceEvent::EpochStart { epoch: 1, .. }) {
            rec.time += 150 * MS;
        }
    }
    let v = check_epoch_sync(&t.done()).unwrap();
    assert!(!v.passed);
    assert_eq!(v.first().unwrap().epoch, Some(1));
    assert!(v.first().unwrap().replicas.contains(&ReplicaId(1)));
}

#[test]
fn spread_of_exactly_delta_s_is_allowed() {
    let mut t = good();
    for rec in t.records.iter_mut() {
        if rec.replica == Some(ReplicaId(2)) && matches!(rec.event, TraceEvent::EpochStart { epoch: 1, .. }) {
            // r0 enters at 200 ms, r2 originally at 220 ms
            rec.time = 300 * MS;
        }
    }
    assert!(check_epoch_sync(&t.done()).unwrap().passed);
}

#[test]
fn missing_lock_is_located() {
    let (b0, _) = chain();
    let mut t = good();
    t.records
        .retain(|r| !(r.replica == Some(ReplicaId(1)) && matches!(r.event, TraceEvent::Lock { cert_epoch: 0, .. })));
    let v = check_lock_invariant(&t.done()).unwrap();
    assert!(!v.passed);
    let first = v.first().unwrap();
    assert_eq!(first.epoch, Some(0));
    assert_eq!(first.replicas, vec![ReplicaId(1)]);
    assert_eq!(first.blocks, vec![b0.id()]);
}

#[test]
fn lock_taken_in_a_later_epoch_does_not_count() {
    let mut t = good();
    for rec in t.records.iter_mut() {
        if rec.replica == Some(ReplicaId(0)) {
            if let TraceEvent::Lock { cert_epoch: 0, in_epoch, .. } = &mut rec.event {
                *in_epoch = 1;
            }
        }
    }
    assert!(!check_lock_invariant(&t.done()).unwrap().passed);
}

#[test]
fn broken_prev_link_is_rejected() {
    let (b0, _) = chain();
    let orphan = Block::new(seeded_payload(64, 0, 1, ReplicaId(1)), Some(BlockId([7; 32])));
    let mut t = good();
    t.block(&orphan);
    for rec in t.records.iter_mut() {
        if let TraceEvent::Commit { block, prev, height: 2, .. } = &mut rec.event {
            *block = orphan.id();
            *prev = orphan.prev();
        }
    }
    let v = check_validity(&t.done()).unwrap();
    assert!(!v.passed);
    assert!(v.violations.iter().any(|x| x.height == Some(2)), "{v}");
    assert_ne!(orphan.prev(), Some(b0.id()));
}

#[test]
fn tampered_payload_is_rejected() {
    let mut t = good();
    for rec in t.records.iter_mut() {
        if let TraceEvent::Block { payload, prev: None, .. } = &mut rec.event {
            let mut bytes = base64::engine::general_purpose::STANDARD.decode(&*payload).unwrap();
            bytes[3] ^= 1;
            *payload = base64::engine::general_purpose::STANDARD.encode(bytes);
        }
    }
    assert!(!check_validity(&t.done()).unwrap().passed);
}

#[test]
fn byzantine_records_are_ignored() {
    let other = Block::new(seeded_payload(64, 9, 0, ReplicaId(0)), None);
    let mut t = good();
    if let TraceEvent::Meta(m) = &mut t.records[0].event {
        m.byzantine = vec![ReplicaId(2)];
    }
    t.at(450 * MS, 2, commit(0, &other, 1));
    assert!(check_safety(&t.done()).unwrap().passed);
}

#[test]
fn horizon_limited_trace_fails_availability_only() {
    let mut t = good();
    t.records.push(TraceRecord {
        time: 10_000 * MS,
        replica: None,
        event: TraceEvent::End { complete: false, reason: "horizon".into() },
    });
    let t = Trace::new(t.records);
    assert!(!CheckKind::Availability.run(&t).unwrap().passed);
    assert!(CheckKind::Safety.run(&t).unwrap().passed);
}
