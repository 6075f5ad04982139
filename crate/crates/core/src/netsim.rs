//! Seeded discrete-event network simulator.
//!
//! Time is integer microseconds. Events at equal times are ordered by kind
//! (deliveries, then crashes and injected sends, then starts, then timers)
//! and then by insertion, so a message arriving exactly when a timer
//! expires is handled first. All randomness comes from one ChaCha stream
//! seeded by the scenario, which makes a run a pure function of its config.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::sync::Arc;

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::Serialize;
use thiserror::Error;

use crate::app::{seeded_payload, ChecksumValidity, SeededPayloads};
use crate::crypto::{Committee, KeyPair};
use crate::replica::{Action, Replica};
use crate::scenario::{ms_to_us, AdversaryMode, ConfigError, DelayDist, ScenarioConfig};
use crate::trace::{Micros, MsgClass, MsgSummary, RunMeta, TimerId, Trace, TraceEvent, TraceRecord};
use crate::types::{leader, Block, BlockId, Epoch, Message, Proposal, ReplicaId, Vote};

/// 99.99th percentile of the standard normal distribution.
const Z_9999: f64 = 3.719_016_485_455_68;
const ALT_PAYLOAD_SALT: u64 = 0x5eed_a17e;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("two different blocks hash to {0}")]
    HashCollision(BlockId),
    #[error("event queue drained with replica {replica} stuck in epoch {epoch:?}")]
    Stalled { replica: ReplicaId, epoch: Option<Epoch>, trace: Box<Trace> },
}

#[derive(Debug, Clone, Default, Serialize, PartialEq)]
pub struct SimStats {
    pub events: u64,
    pub messages: u64,
    pub bytes: u64,
    pub end_time: Micros,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: Trace,
    pub stats: SimStats,
}

/// Runs one scenario to completion.
pub fn run(cfg: &ScenarioConfig) -> Result<RunOutcome, SimError> {
    Simulation::new(cfg)?.run()
}

#[derive(Debug, Clone)]
struct Sampler {
    dist: DelayDist,
    /// Hard upper bound, when the class has one.
    bound: Option<Micros>,
    /// Scale for log-normal draws without an explicit 99.99th percentile.
    reference_ms: f64,
}

impl Sampler {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Option<Micros> {
        let raw = match self.dist {
            DelayDist::Fixed { ms } => ms_to_us(ms),
            DelayDist::Uniform { lo_ms, hi_ms } => rng.random_range(ms_to_us(lo_ms)..=ms_to_us(hi_ms)),
            DelayDist::LogNormal { sigma, p9999_ms } => {
                let target = p9999_ms.unwrap_or(self.reference_ms);
                let mu = target.ln() - Z_9999 * sigma;
                let ln = LogNormal::new(mu, sigma).expect("validated sigma");
                let cap = self.bound.map_or(10.0 * target, |b| b as f64 / 1000.0);
                let ms = loop {
                    let x = ln.sample(rng);
                    if x <= cap {
                        break x;
                    }
                };
                ms_to_us(ms)
            }
            DelayDist::Never => return None,
        };
        let d = raw.max(1);
        Some(self.bound.map_or(d, |b| d.min(b)))
    }
}

#[derive(Debug)]
enum Event {
    Deliver { from: ReplicaId, to: ReplicaId, msg: Arc<Message>, class: MsgClass, size: usize, sent_at: Micros },
    Crash(ReplicaId),
    Inject { from: ReplicaId, to: Vec<ReplicaId>, msg: Arc<Message> },
    Start(ReplicaId),
    Timer { replica: ReplicaId, timer: TimerId },
}

impl Event {
    fn priority(&self) -> u8 {
        match self {
            Event::Deliver { .. } => 0,
            Event::Crash(_) => 1,
            Event::Inject { .. } => 2,
            Event::Start(_) => 3,
            Event::Timer { .. } => 4,
        }
    }
}

struct Scheduled {
    time: Micros,
    priority: u8,
    seq: u64,
    event: Event,
}

impl Scheduled {
    fn key(&self) -> (Micros, u8, u64) {
        (self.time, self.priority, self.seq)
    }
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.key().cmp(&self.key())
    }
}

pub struct Simulation {
    cfg: ScenarioConfig,
    committee: Arc<Committee>,
    keys: Vec<KeyPair>,
    replicas: Vec<Replica>,
    byzantine: Vec<bool>,
    crashed: Vec<bool>,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Scheduled>,
    seq: u64,
    now: Micros,
    gst: Option<Micros>,
    small: Sampler,
    large: Sampler,
    pre_gst: Sampler,
    records: Vec<TraceRecord>,
    blocks: HashMap<BlockId, Block>,
    equivocated: BTreeSet<Epoch>,
    stats: SimStats,
}

impl Simulation {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let (committee, keys) = Committee::generate(cfg.n, cfg.f, cfg.signature_scheme.scheme(), cfg.seed);
        let committee = Arc::new(committee);
        let params = cfg.protocol_params();
        let validity = Arc::new(ChecksumValidity);
        let replicas = keys
            .iter()
            .map(|k| {
                Replica::new(
                    committee.clone(),
                    k.clone(),
                    params.clone(),
                    validity.clone(),
                    Box::new(SeededPayloads { size: cfg.block_payload_size, salt: cfg.seed }),
                )
            })
            .collect();
        let mut byzantine = vec![false; cfg.n];
        for &b in &cfg.byzantine {
            byzantine[b as usize] = true;
        }
        Ok(Self {
            committee,
            keys,
            replicas,
            byzantine,
            crashed: vec![false; cfg.n],
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            gst: cfg.gst.micros(),
            small: Sampler { dist: cfg.delays.small.clone(), bound: Some(cfg.delta_s_us()), reference_ms: cfg.delta_s },
            large: Sampler { dist: cfg.delays.large.clone(), bound: Some(cfg.delta_l_us()), reference_ms: cfg.delta_l },
            pre_gst: Sampler { dist: cfg.delays.large_pre_gst.clone(), bound: None, reference_ms: 4.0 * cfg.delta_l },
            records: Vec::new(),
            blocks: HashMap::new(),
            equivocated: BTreeSet::new(),
            stats: SimStats::default(),
            cfg: cfg.clone(),
        })
    }

    fn meta(&self) -> RunMeta {
        RunMeta {
            n: self.cfg.n,
            f: self.cfg.f,
            byzantine: self.cfg.byzantine_ids(),
            adversary: self.cfg.adversary.name().to_string(),
            delta_s: self.cfg.delta_s_us(),
            delta_l: self.cfg.delta_l_us(),
            gst: self.gst,
            start_stagger: self.cfg.start_stagger_us(),
            small_threshold: self.cfg.small_threshold,
            epochs: self.cfg.epochs,
            fast_path: self.cfg.fast_path,
            seed: self.cfg.seed,
        }
    }

    fn schedule(&mut self, time: Micros, event: Event) {
        self.seq += 1;
        self.queue.push(Scheduled { time, priority: event.priority(), seq: self.seq, event });
    }

    fn record(&mut self, replica: Option<ReplicaId>, event: TraceEvent) {
        self.records.push(TraceRecord { time: self.now, replica, event });
    }

    fn n(&self) -> usize {
        self.cfg.n
    }

    pub fn run(mut self) -> Result<RunOutcome, SimError> {
        let meta = self.meta();
        self.record(None, TraceEvent::Meta(meta));
        let stagger = self.cfg.start_stagger_us();
        for i in 0..self.n() {
            let r = ReplicaId(i as u32);
            if self.byzantine[i] && self.cfg.adversary == AdversaryMode::Crash {
                self.schedule(ms_to_us(self.cfg.adversary_params.crash_at_ms), Event::Crash(r));
            }
            let offset = if stagger == 0 { 0 } else { self.rng.random_range(0..=stagger) };
            self.schedule(offset, Event::Start(r));
        }
        let horizon = self.cfg.horizon_us();
        let mut complete = true;
        while let Some(next) = self.queue.pop() {
            if next.time > horizon {
                complete = false;
                break;
            }
            self.now = next.time;
            self.stats.events += 1;
            self.handle(next.event)?;
        }
        if complete {
            for i in 0..self.n() {
                if self.byzantine[i] || self.replicas[i].is_halted() {
                    continue;
                }
                let replica = ReplicaId(i as u32);
                let epoch = self.replicas[i].epoch();
                self.record(None, TraceEvent::End { complete: false, reason: "stalled".into() });
                return Err(SimError::Stalled { replica, epoch, trace: Box::new(Trace::new(self.records)) });
            }
        } else {
            self.now = horizon;
        }
        let reason = if complete { "drained" } else { "horizon" };
        self.record(None, TraceEvent::End { complete, reason: reason.into() });
        self.stats.end_time = self.now;
        Ok(RunOutcome { trace: Trace::new(self.records), stats: self.stats })
    }

    fn handle(&mut self, event: Event) -> Result<(), SimError> {
        match event {
            Event::Start(r) => {
                if !self.crashed[r.index()] {
                    let acts = self.replicas[r.index()].bootstrap();
                    self.apply(r, acts)?;
                }
            }
            Event::Deliver { from, to, msg, class, size, sent_at } => {
                if !self.crashed[to.index()] {
                    self.record(
                        Some(to),
                        TraceEvent::Deliver { from, msg: MsgSummary::of(&msg), class, size, sent_at },
                    );
                    let acts = self.replicas[to.index()].on_message(&msg);
                    self.apply(to, acts)?;
                }
            }
            Event::Timer { replica, timer } => {
                let i = replica.index();
                if !self.crashed[i] && self.replicas[i].pending_timers().any(|t| *t == timer) {
                    self.record(Some(replica), TraceEvent::TimerFire { timer });
                    let acts = self.replicas[i].on_timer(timer);
                    self.apply(replica, acts)?;
                }
            }
            Event::Crash(r) => {
                self.crashed[r.index()] = true;
                self.record(Some(r), TraceEvent::Crash);
            }
            Event::Inject { from, to, msg } => {
                if !self.crashed[from.index()] {
                    self.send(from, &to, msg)?;
                }
            }
        }
        Ok(())
    }

    fn apply(&mut self, who: ReplicaId, actions: Vec<Action>) -> Result<(), SimError> {
        for a in actions {
            match a {
                Action::Broadcast { msg, .. } => self.outbound(who, msg)?,
                Action::StartTimer { timer, duration } => {
                    self.schedule(self.now + duration, Event::Timer { replica: who, timer });
                }
                Action::Trace(ev) => self.record(Some(who), ev),
                Action::Commit { .. } | Action::CommitBlocks(_) => {}
            }
        }
        Ok(())
    }

    fn others(&self, who: ReplicaId) -> Vec<ReplicaId> {
        (0..self.n() as u32).map(ReplicaId).filter(|r| *r != who).collect()
    }

    /// Routes a broadcast, letting the adversary rewrite traffic from
    /// Byzantine replicas.
    fn outbound(&mut self, who: ReplicaId, msg: Arc<Message>) -> Result<(), SimError> {
        if self.byzantine[who.index()] {
            let e = msg.epoch();
            let lead = leader(e, self.n());
            match self.cfg.adversary {
                AdversaryMode::SilentLeader if lead == who => {
                    let own = match &*msg {
                        Message::Propose(_) => true,
                        Message::Vote(v) => v.signer == who,
                        _ => false,
                    };
                    if own {
                        return Ok(());
                    }
                }
                AdversaryMode::Equivocate if self.byzantine[lead.index()] => {
                    // Byzantine-led epochs are fully scripted.
                    if let Message::Propose(p) = &*msg {
                        if lead == who && p.epoch == e && self.equivocated.insert(e) {
                            return self.equivocate(who, p);
                        }
                    }
                    return Ok(());
                }
                _ => {}
            }
        }
        let to = self.others(who);
        self.send(who, &to, msg)
    }

    /// Two conflicting proposals to two halves of the honest replicas. The
    /// colluders then vote for the first block only, and keep those votes
    /// from the next leader.
    fn equivocate(&mut self, who: ReplicaId, p: &Proposal) -> Result<(), SimError> {
        let e = p.epoch;
        let n = self.n();
        let a = p.block.clone();
        let b =
            Block::new(seeded_payload(self.cfg.block_payload_size, self.cfg.seed ^ ALT_PAYLOAD_SALT, e, who), a.prev());
        let honest: Vec<ReplicaId> = (0..n as u32).map(ReplicaId).filter(|r| !self.byzantine[r.index()]).collect();
        let colluders: Vec<ReplicaId> = (0..n as u32)
            .map(ReplicaId)
            .filter(|r| self.byzantine[r.index()] && *r != who && !self.crashed[r.index()])
            .collect();
        let k = ((honest.len() as f64) * self.cfg.adversary_params.split).round() as usize;
        let (ga, gb) = honest.split_at(k.min(honest.len()));
        let mut to_a = ga.to_vec();
        to_a.extend(&colluders);
        let key = self.keys[who.index()].clone();
        let va = Vote::new(&self.committee, &key, e, a.id());
        let vb = Vote::new(&self.committee, &key, e, b.id());
        let pa = Proposal { epoch: e, block: a.clone(), justification: p.justification.clone() };
        let pb = Proposal { epoch: e, block: b, justification: p.justification.clone() };
        self.send(who, &to_a, Arc::new(Message::Vote(va)))?;
        self.send(who, &to_a, Arc::new(Message::Propose(pa)))?;
        self.send(who, gb, Arc::new(Message::Vote(vb)))?;
        self.send(who, gb, Arc::new(Message::Propose(pb)))?;

        let next = leader(e + 1, n);
        let delay = ms_to_us(self.cfg.adversary_params.vote_delay_ms);
        for c in colluders {
            let vote = Vote::new(&self.committee, &self.keys[c.index()], e, a.id());
            let to: Vec<ReplicaId> = (0..n as u32).map(ReplicaId).filter(|r| *r != c && *r != next).collect();
            let msg = Arc::new(Message::Vote(vote));
            if delay == 0 {
                self.send(c, &to, msg)?;
            } else {
                self.schedule(self.now + delay, Event::Inject { from: c, to, msg });
            }
        }
        Ok(())
    }

    fn note_block(&mut self, block: &Block) -> Result<(), SimError> {
        match self.blocks.get(&block.id()) {
            Some(known) => {
                if known.payload() != block.payload() || known.prev() != block.prev() {
                    return Err(SimError::HashCollision(block.id()));
                }
            }
            None => {
                self.blocks.insert(block.id(), block.clone());
                let payload = base64::engine::general_purpose::STANDARD.encode(block.payload());
                self.record(None, TraceEvent::Block { block: block.id(), prev: block.prev(), payload });
            }
        }
        Ok(())
    }

    fn delay(&mut self, from: ReplicaId, class: MsgClass) -> Option<Micros> {
        match class {
            MsgClass::S => {
                let rate = self.cfg.delays.small_violation_rate;
                if rate > 0.0 && self.rng.random_bool(rate) {
                    let ds = self.cfg.delta_s_us();
                    return Some(ds + self.rng.random_range(1..=ds));
                }
                self.small.sample(&mut self.rng)
            }
            MsgClass::L => {
                if self.byzantine[from.index()] && self.cfg.adversary == AdversaryMode::DelayL {
                    return self.pre_gst.sample(&mut self.rng);
                }
                match self.gst {
                    Some(g) if self.now >= g => self.large.sample(&mut self.rng),
                    Some(g) => {
                        let latest = g + self.cfg.delta_l_us() - self.now;
                        Some(self.pre_gst.sample(&mut self.rng).map_or(latest, |d| d.min(latest)))
                    }
                    None => self.pre_gst.sample(&mut self.rng),
                }
            }
        }
    }

    fn send(&mut self, from: ReplicaId, to: &[ReplicaId], msg: Arc<Message>) -> Result<(), SimError> {
        let size = msg.encoded_len();
        let class = MsgClass::classify(size, self.cfg.small_threshold);
        if let Message::Propose(p) = &*msg {
            self.note_block(&p.block)?;
        }
        let summary = MsgSummary::of(&msg);
        self.record(Some(from), TraceEvent::Send { msg: summary.clone(), class, size, to: to.to_vec() });
        for &r in to {
            self.stats.messages += 1;
            self.stats.bytes += size as u64;
            match self.delay(from, class) {
                Some(d) => {
                    let sent_at = self.now;
                    self.schedule(self.now + d, Event::Deliver { from, to: r, msg: msg.clone(), class, size, sent_at });
                }
                None => self.record(Some(from), TraceEvent::Held { to: r, msg: summary.clone() }),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::SchemeKind;

    fn quick(n: usize, f: usize) -> ScenarioConfig {
        ScenarioConfig {
            n,
            f,
            epochs: 6,
            block_payload_size: 4096,
            signature_scheme: SchemeKind::TestMac,
            ..Default::default()
        }
    }

    #[test]
    fn event_order_breaks_ties_by_kind_then_seq() {
        let mut h = BinaryHeap::new();
        let mk = |time, event: Event, seq| Scheduled { time, priority: event.priority(), seq, event };
        h.push(mk(5, Event::Start(ReplicaId(0)), 1));
        h.push(mk(5, Event::Crash(ReplicaId(1)), 2));
        h.push(mk(3, Event::Start(ReplicaId(2)), 3));
        h.push(mk(5, Event::Crash(ReplicaId(3)), 0));
        let order: Vec<(Micros, u64)> = std::iter::from_fn(|| h.pop().map(|s| (s.time, s.seq))).collect();
        assert_eq!(order, vec![(3, 3), (5, 0), (5, 2), (5, 1)]);
    }

    #[test]
    fn samplers_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Sampler {
            dist: DelayDist::LogNormal { sigma: 1.5, p9999_ms: Some(1000.0) },
            bound: Some(100_000),
            reference_ms: 100.0,
        };
        for _ in 0..2000 {
            let d = s.sample(&mut rng).unwrap();
            assert!((1..=100_000).contains(&d));
        }
        let u = Sampler { dist: DelayDist::Uniform { lo_ms: 1.0, hi_ms: 2.0 }, bound: None, reference_ms: 1.0 };
        for _ in 0..100 {
            assert!((1000..=2000).contains(&u.sample(&mut rng).unwrap()));
        }
        let never = Sampler { dist: DelayDist::Never, bound: None, reference_ms: 1.0 };
        assert_eq!(never.sample(&mut rng), None);
    }

    #[test]
    fn failure_free_run_commits_every_epoch() {
        let out = run(&quick(4, 1)).unwrap();
        assert!(out.trace.is_complete());
        let commits = out
            .trace
            .by_replica(ReplicaId(2))
            .filter(|r| matches!(r.event, TraceEvent::Commit { direct: true, .. }))
            .count();
        assert_eq!(commits, 6);
    }

    #[test]
    fn same_seed_same_trace() {
        let a = run(&quick(3, 1)).unwrap().trace.to_ndjson();
        let b = run(&quick(3, 1)).unwrap().trace.to_ndjson();
        assert_eq!(a, b);
        let mut other = quick(3, 1);
        other.seed = 1;
        assert_ne!(a, run(&other).unwrap().trace.to_ndjson());
    }

    #[test]
    fn invalid_config_is_reported() {
        let mut c = quick(4, 2);
        c.epochs = 1;
        assert!(matches!(run(&c), Err(SimError::Config(_))));
    }
}
