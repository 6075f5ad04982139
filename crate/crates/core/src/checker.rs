//! Offline checks over execution traces.
//!
//! Every check is a pure function of the trace. Only records of honest
//! replicas (per the `META` record) are trusted.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::app::{BlockValidity, ChecksumValidity};
use crate::latmodel::percentile_sorted;
use crate::trace::{EpochState, Micros, MsgClass, RunMeta, Trace, TraceError, TraceEvent};
use crate::types::{leader, Block, BlockId, CertKind, Epoch, ReplicaId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Safety,
    EpochSync,
    Liveness,
    LockInvariant,
    Availability,
    Validity,
    Bounds,
}

impl CheckKind {
    pub const ALL: [CheckKind; 7] = [
        CheckKind::Safety,
        CheckKind::EpochSync,
        CheckKind::Liveness,
        CheckKind::LockInvariant,
        CheckKind::Availability,
        CheckKind::Validity,
        CheckKind::Bounds,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckKind::Safety => "safety",
            CheckKind::EpochSync => "epoch_sync",
            CheckKind::Liveness => "liveness",
            CheckKind::LockInvariant => "lock_invariant",
            CheckKind::Availability => "availability",
            CheckKind::Validity => "validity",
            CheckKind::Bounds => "bounds",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn run(self, trace: &Trace) -> Result<Verdict, TraceError> {
        match self {
            CheckKind::Safety => check_safety(trace),
            CheckKind::EpochSync => check_epoch_sync(trace),
            CheckKind::Liveness => check_liveness(trace),
            CheckKind::LockInvariant => check_lock_invariant(trace),
            CheckKind::Availability => check_availability(trace),
            CheckKind::Validity => check_validity(trace),
            CheckKind::Bounds => check_bounds(trace),
        }
    }
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One located problem found by a check.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub replicas: Vec<ReplicaId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<Epoch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub blocks: Vec<BlockId>,
    pub message: String,
}

impl Violation {
    fn new(message: impl Into<String>) -> Self {
        Self { replicas: Vec::new(), epoch: None, height: None, blocks: Vec::new(), message: message.into() }
    }

    fn replicas(mut self, r: impl IntoIterator<Item = ReplicaId>) -> Self {
        self.replicas = r.into_iter().collect();
        self
    }

    fn epoch(mut self, e: Epoch) -> Self {
        self.epoch = Some(e);
        self
    }

    fn height(mut self, h: u64) -> Self {
        self.height = Some(h);
        self
    }

    fn blocks(mut self, b: impl IntoIterator<Item = BlockId>) -> Self {
        self.blocks = b.into_iter().collect();
        self
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)?;
        if let Some(e) = self.epoch {
            write!(f, " [epoch {e}]")?;
        }
        if let Some(h) = self.height {
            write!(f, " [height {h}]")?;
        }
        if !self.replicas.is_empty() {
            let r: Vec<String> = self.replicas.iter().map(|r| r.to_string()).collect();
            write!(f, " [replicas {}]", r.join(","))?;
        }
        if !self.blocks.is_empty() {
            let b: Vec<String> = self.blocks.iter().map(|b| b.short()).collect();
            write!(f, " [blocks {}]", b.join(","))?;
        }
        Ok(())
    }
}

const MAX_VIOLATIONS: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub check: CheckKind,
    pub passed: bool,
    /// Number of items the check actually constrained.
    pub checked: usize,
    pub violations: Vec<Violation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Verdict {
    fn new(check: CheckKind) -> Self {
        Self { check, passed: true, checked: 0, violations: Vec::new(), note: None }
    }

    fn fail(&mut self, v: Violation) {
        self.passed = false;
        if self.violations.len() < MAX_VIOLATIONS {
            self.violations.push(v);
        }
    }

    pub fn first(&self) -> Option<&Violation> {
        self.violations.first()
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {:<15} ({} checked)", self.check.name(), self.checked)?;
        if let Some(n) = &self.note {
            write!(f, " {n}")?;
        }
        if let Some(v) = self.first() {
            write!(f, ": {v}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct CommitRec {
    time: Micros,
    epoch: Epoch,
    block: BlockId,
    height: u64,
    prev: Option<BlockId>,
    direct: bool,
}

/// Per-replica views extracted from one pass over the trace.
struct Index<'a> {
    meta: &'a RunMeta,
    honest: Vec<ReplicaId>,
    commits: BTreeMap<ReplicaId, Vec<CommitRec>>,
    decisions: BTreeMap<ReplicaId, Vec<(Micros, Epoch, BlockId)>>,
    states: BTreeMap<ReplicaId, Vec<(Micros, Epoch, EpochState)>>,
    epoch_starts: BTreeMap<ReplicaId, Vec<(Micros, Epoch)>>,
    locks: BTreeMap<ReplicaId, Vec<(Epoch, BlockId, Epoch)>>,
    stores: BTreeMap<ReplicaId, BTreeSet<BlockId>>,
    /// Every block certificate seen in the trace, from any source.
    block_certs: BTreeMap<Epoch, BTreeSet<BlockId>>,
    certs_by_kind: BTreeMap<(Epoch, CertKind), BTreeSet<ReplicaId>>,
    block_content: HashMap<BlockId, (Option<BlockId>, String)>,
    proposal_epoch: HashMap<BlockId, Epoch>,
}

impl<'a> Index<'a> {
    fn build(trace: &'a Trace) -> Result<Self, TraceError> {
        let meta = trace.meta()?;
        let honest = meta.honest();
        let mut ix = Index {
            meta,
            honest,
            commits: BTreeMap::new(),
            decisions: BTreeMap::new(),
            states: BTreeMap::new(),
            epoch_starts: BTreeMap::new(),
            locks: BTreeMap::new(),
            stores: BTreeMap::new(),
            block_certs: BTreeMap::new(),
            certs_by_kind: BTreeMap::new(),
            block_content: HashMap::new(),
            proposal_epoch: HashMap::new(),
        };
        for rec in &trace.records {
            let t = rec.time;
            if let TraceEvent::Block { block, prev, payload } = &rec.event {
                ix.block_content.entry(*block).or_insert((*prev, payload.clone()));
                continue;
            }
            let Some(r) = rec.replica else { continue };
            // certificate evidence counts from anyone, since certificates
            // are self-verifying
            match &rec.event {
                TraceEvent::Cert { cert: CertKind::Block, epoch, block: Some(b), .. } => {
                    ix.block_certs.entry(*epoch).or_default().insert(*b);
                }
                TraceEvent::Send { msg, .. } if msg.is("QUIT_EPOCH") && msg.cert == Some(CertKind::Block) => {
                    if let Some(b) = msg.block {
                        ix.block_certs.entry(msg.epoch).or_default().insert(b);
                    }
                }
                TraceEvent::Send { msg, .. } if msg.is("PROPOSE") => {
                    if let Some(b) = msg.block {
                        ix.proposal_epoch.entry(b).or_insert(msg.epoch);
                    }
                }
                _ => {}
            }
            if !meta.is_honest(r) {
                continue;
            }
            match &rec.event {
                TraceEvent::Commit { epoch, block, height, prev, direct } => {
                    ix.commits.entry(r).or_default().push(CommitRec {
                        time: t,
                        epoch: *epoch,
                        block: *block,
                        height: *height,
                        prev: *prev,
                        direct: *direct,
                    });
                }
                TraceEvent::Decision { epoch, block } => ix.decisions.entry(r).or_default().push((t, *epoch, *block)),
                TraceEvent::StateChange { epoch, state } => ix.states.entry(r).or_default().push((t, *epoch, *state)),
                TraceEvent::EpochStart { epoch, .. } => ix.epoch_starts.entry(r).or_default().push((t, *epoch)),
                TraceEvent::Lock { cert_epoch, block, in_epoch } => {
                    ix.locks.entry(r).or_default().push((*cert_epoch, *block, *in_epoch))
                }
                TraceEvent::Store { block } => {
                    ix.stores.entry(r).or_default().insert(*block);
                }
                TraceEvent::Cert { cert, epoch, .. } => {
                    ix.certs_by_kind.entry((*epoch, *cert)).or_default().insert(r);
                }
                _ => {}
            }
        }
        Ok(ix)
    }

    /// Time each honest replica first reached epoch `e` or later.
    fn reach_times(&self, e: Epoch) -> BTreeMap<ReplicaId, Micros> {
        let mut out = BTreeMap::new();
        for r in &self.honest {
            if let Some(starts) = self.epoch_starts.get(r) {
                if let Some((t, _)) = starts.iter().find(|(_, ep)| *ep >= e) {
                    out.insert(*r, *t);
                }
            }
        }
        out
    }

    fn max_epoch(&self) -> Option<Epoch> {
        self.epoch_starts.values().flat_map(|v| v.iter().map(|(_, e)| *e)).max()
    }

    /// Honest-leader epochs whose every honest start happened at or after
    /// GST; all honest-leader epochs when GST never comes.
    fn post_gst_honest_epochs(&self) -> Vec<Epoch> {
        let last = self.meta.epochs;
        (0..last)
            .filter(|&e| self.meta.is_honest(leader(e, self.meta.n)))
            .filter(|&e| match self.meta.gst {
                None => true,
                Some(g) => {
                    let reach = self.reach_times(e);
                    reach.len() == self.honest.len() && reach.values().all(|&t| t >= g)
                }
            })
            .collect()
    }
}

pub fn check_safety(trace: &Trace) -> Result<Verdict, TraceError> {
    let ix = Index::build(trace)?;
    let mut v = Verdict::new(CheckKind::Safety);
    let mut by_height: BTreeMap<u64, (BlockId, ReplicaId)> = BTreeMap::new();
    for (r, commits) in &ix.commits {
        let mut own: BTreeMap<u64, &CommitRec> = BTreeMap::new();
        for c in commits {
            v.checked += 1;
            if let Some(prev) = own.insert(c.height, c) {
                if prev.block != c.block {
                    v.fail(
                        Violation::new("replica committed two blocks at one height")
                            .replicas([*r])
                            .height(c.height)
                            .blocks([prev.block, c.block]),
                    );
                }
            }
            match by_height.get(&c.height) {
                Some((b, q)) if *b != c.block => v.fail(
                    Violation::new("conflicting commits at the same height")
                        .replicas([*q, *r])
                        .height(c.height)
                        .blocks([*b, c.block]),
                ),
                Some(_) => {}
                None => {
                    by_height.insert(c.height, (c.block, *r));
                }
            }
        }
        // prefix consistency: heights are contiguous from 1 and linked
        let mut expected_prev: Option<BlockId> = None;
        for (i, (h, c)) in own.iter().enumerate() {
            if *h != i as u64 + 1 {
                v.fail(Violation::new("committed chain has a gap").replicas([*r]).height(*h));
                break;
            }
            if c.prev != expected_prev {
                v.fail(
                    Violation::new("committed block does not extend its predecessor")
                        .replicas([*r])
                        .height(*h)
                        .blocks([c.block]),
                );
                break;
            }
            expected_prev = Some(c.block);
        }
    }
    let mut decided: BTreeMap<Epoch, (BlockId, ReplicaId)> = BTreeMap::new();
    for (r, ds) in &ix.decisions {
        for (_, e, b) in ds {
            match decided.get(e) {
                Some((b0, q)) if b0 != b => v.fail(
                    Violation::new("conflicting decisions in one epoch").replicas([*q, *r]).epoch(*e).blocks([*b0, *b]),
                ),
                Some(_) => {}
                None => {
                    decided.insert(*e, (*b, *r));
                }
            }
        }
    }
    Ok(v)
}

pub fn check_epoch_sync(trace: &Trace) -> Result<Verdict, TraceError> {
    let ix = Index::build(trace)?;
    let mut v = Verdict::new(CheckKind::EpochSync);
    if ix.honest.len() < 2 {
        v.note = Some("vacuous: fewer than two honest replicas".into());
        return Ok(v);
    }
    let Some(max_e) = ix.max_epoch() else {
        return Ok(v);
    };
    for e in 0..=max_e {
        let reach = ix.reach_times(e);
        if reach.len() < ix.honest.len() {
            continue;
        }
        v.checked += 1;
        let bound = if e == 0 { ix.meta.start_stagger } else { ix.meta.delta_s };
        let (early_r, early) = reach.iter().min_by_key(|(r, t)| (**t, **r)).map(|(r, t)| (*r, *t)).unwrap();
        let (late_r, late) =
            reach.iter().max_by_key(|(r, t)| (**t, std::cmp::Reverse(**r))).map(|(r, t)| (*r, *t)).unwrap();
        if late - early > bound {
            v.fail(
                Violation::new(format!("epoch entered {} us apart, bound {} us", late - early, bound))
                    .epoch(e)
                    .replicas([early_r, late_r]),
            );
        }
    }
    Ok(v)
}

pub fn check_liveness(trace: &Trace) -> Result<Verdict, TraceError> {
    let ix = Index::build(trace)?;
    let mut v = Verdict::new(CheckKind::Liveness);
    let epochs = if ix.meta.gst.is_none() {
        (0..ix.meta.epochs).filter(|&e| ix.meta.is_honest(leader(e, ix.meta.n))).collect()
    } else {
        ix.post_gst_honest_epochs()
    };
    for &e in &epochs {
        v.checked += 1;
        for r in &ix.honest {
            let committed_state =
                ix.states.get(r).is_some_and(|s| s.iter().any(|(_, ep, st)| *ep == e && *st == EpochState::Committed));
            // The decision is the direct commit even when the block already
            // reached the ledger as an ancestor of a later decision.
            let direct = ix.decisions.get(r).is_some_and(|d| d.iter().any(|(_, ep, _)| *ep == e));
            if !(committed_state && direct) {
                v.fail(Violation::new("honest-leader epoch without a direct commit").epoch(e).replicas([*r]));
            }
        }
    }
    for r in &ix.honest {
        let height = ix.commits.get(r).map_or(0, |c| c.iter().map(|c| c.height).max().unwrap_or(0));
        if (height as usize) < epochs.len() {
            v.fail(
                Violation::new(format!("committed height {height} below {} live epochs", epochs.len())).replicas([*r]),
            );
        }
    }
    if !trace.is_complete() {
        v.note = Some("trace is horizon-limited".into());
    }
    Ok(v)
}

pub fn check_lock_invariant(trace: &Trace) -> Result<Verdict, TraceError> {
    let ix = Index::build(trace)?;
    let mut v = Verdict::new(CheckKind::LockInvariant);
    let mut direct: BTreeSet<(Epoch, BlockId)> = BTreeSet::new();
    for ds in ix.decisions.values() {
        for (_, e, b) in ds {
            direct.insert((*e, *b));
        }
    }
    for (e, b) in direct {
        v.checked += 1;
        if let Some(others) = ix.block_certs.get(&e) {
            for o in others.iter().filter(|o| **o != b) {
                v.fail(Violation::new("another block certified in a committed epoch").epoch(e).blocks([b, *o]));
            }
        }
        for r in &ix.honest {
            let locked =
                ix.locks.get(r).is_some_and(|ls| ls.iter().any(|(ce, lb, ie)| *ce == e && *lb == b && *ie == e));
            if !locked {
                v.fail(
                    Violation::new("honest replica did not lock the committed block in its epoch")
                        .epoch(e)
                        .replicas([*r])
                        .blocks([b]),
                );
            }
        }
    }
    Ok(v)
}

pub fn check_availability(trace: &Trace) -> Result<Verdict, TraceError> {
    let ix = Index::build(trace)?;
    let mut v = Verdict::new(CheckKind::Availability);
    if !trace.is_complete() {
        v.fail(Violation::new("trace is horizon-limited; availability cannot be established"));
    }
    let committed: BTreeSet<BlockId> = ix.commits.values().flatten().map(|c| c.block).collect();
    for b in &committed {
        v.checked += 1;
        for r in &ix.honest {
            if !ix.stores.get(r).is_some_and(|s| s.contains(b)) {
                v.fail(Violation::new("committed block never received").replicas([*r]).blocks([*b]));
            }
        }
    }
    for (r, ds) in &ix.decisions {
        let mine: BTreeSet<BlockId> =
            ix.commits.get(r).map(|c| c.iter().map(|c| c.block).collect()).unwrap_or_default();
        for (_, e, b) in ds {
            if !mine.contains(b) {
                v.fail(Violation::new("decided block never committed").replicas([*r]).epoch(*e).blocks([*b]));
            }
        }
    }
    Ok(v)
}

pub fn check_validity(trace: &Trace) -> Result<Verdict, TraceError> {
    let ix = Index::build(trace)?;
    let mut v = Verdict::new(CheckKind::Validity);
    let mut verdicts: HashMap<BlockId, bool> = HashMap::new();
    for (r, commits) in &ix.commits {
        let mut by_height: BTreeMap<u64, &CommitRec> = BTreeMap::new();
        for c in commits {
            by_height.insert(c.height, c);
        }
        for c in commits {
            v.checked += 1;
            let ok = *verdicts.entry(c.block).or_insert_with(|| match ix.block_content.get(&c.block) {
                Some((prev, payload)) => match base64::engine::general_purpose::STANDARD.decode(payload) {
                    Ok(bytes) => {
                        let blk = Block::new(bytes, *prev);
                        blk.id() == c.block && ChecksumValidity.valid(&blk)
                    }
                    Err(_) => false,
                },
                None => false,
            });
            if !ok {
                v.fail(Violation::new("committed block fails valid()").replicas([*r]).blocks([c.block]));
            }
            if let Some((prev, _)) = ix.block_content.get(&c.block) {
                if *prev != c.prev {
                    v.fail(
                        Violation::new("commit record disagrees with block content").replicas([*r]).blocks([c.block]),
                    );
                }
            }
            let expected = if c.height <= 1 { None } else { by_height.get(&(c.height - 1)).map(|p| p.block) };
            if c.height > 1 && expected.is_none() {
                v.fail(Violation::new("predecessor not committed").replicas([*r]).height(c.height));
            } else if c.prev != expected {
                v.fail(
                    Violation::new("prev link does not match predecessor")
                        .replicas([*r])
                        .height(c.height)
                        .blocks([c.block]),
                );
            }
        }
    }
    Ok(v)
}

/// Audits the simulator itself: every delivery respects the delay model.
pub fn check_bounds(trace: &Trace) -> Result<Verdict, TraceError> {
    let meta = trace.meta()?;
    let mut v = Verdict::new(CheckKind::Bounds);
    let exempt_l = meta.adversary == "delay_l";
    for rec in &trace.records {
        let TraceEvent::Deliver { from, class, sent_at, msg, .. } = &rec.event else {
            continue;
        };
        v.checked += 1;
        let delay = rec.time - sent_at;
        let limit = match class {
            MsgClass::S => Some(*sent_at + meta.delta_s),
            MsgClass::L if exempt_l && !meta.is_honest(*from) => None,
            MsgClass::L => meta.gst.map(|g| sent_at.max(&g) + meta.delta_l),
        };
        if let Some(l) = limit {
            if rec.time > l {
                let mut viol =
                    Violation::new(format!("{class:?} {} delivered after {delay} us", msg.kind)).epoch(msg.epoch);
                viol.replicas = vec![*from];
                if let Some(r) = rec.replica {
                    viol.replicas.push(r);
                }
                v.fail(viol);
            }
        }
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub verdicts: Vec<Verdict>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    pub fn get(&self, k: CheckKind) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.check == k)
    }
}

pub fn run_checks(trace: &Trace, checks: &[CheckKind]) -> Result<CheckReport, TraceError> {
    let verdicts = checks.iter().map(|k| k.run(trace)).collect::<Result<_, _>>()?;
    Ok(CheckReport { verdicts })
}

// ---- metrics ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct LatencySummary {
    pub count: usize,
    pub mean_ms: Option<f64>,
    pub p50_ms: Option<f64>,
    pub p99_ms: Option<f64>,
    pub min_ms: Option<f64>,
    pub max_ms: Option<f64>,
}

impl LatencySummary {
    pub fn from_micros(samples: &[Micros]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_unstable();
        let ms = |us: Micros| us as f64 / 1000.0;
        let mean = s.iter().map(|&x| x as f64).sum::<f64>() / s.len() as f64 / 1000.0;
        Self {
            count: s.len(),
            mean_ms: Some(mean),
            p50_ms: percentile_sorted(&s, 50.0).ok().map(ms),
            p99_ms: percentile_sorted(&s, 99.0).ok().map(ms),
            min_ms: s.first().copied().map(ms),
            max_ms: s.last().copied().map(ms),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochOutcome {
    Committed,
    Equivocation,
    Silence,
    /// Ended by a certificate that nobody decided on directly.
    Certified,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: Epoch,
    pub leader: ReplicaId,
    pub leader_honest: bool,
    pub outcome: EpochOutcome,
    /// Blocks of this epoch that some replica certified.
    pub certified: Vec<BlockId>,
    /// The block proposed in this epoch that ended up in an honest ledger.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub committed: Option<BlockId>,
    pub direct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Leader's proposal send to the leader's direct commit of that block.
    pub latency: LatencySummary,
    pub committed_blocks: u64,
    /// Committed blocks per simulated second, up to the last commit.
    pub throughput_bps: f64,
    pub messages: u64,
    pub bytes: u64,
    pub epochs: Vec<EpochSummary>,
}

impl Metrics {
    pub fn count(&self, outcome: EpochOutcome) -> usize {
        self.epochs.iter().filter(|e| e.outcome == outcome).count()
    }

    /// Epochs with a Byzantine leader whose block was certified and later
    /// committed only as an ancestor.
    pub fn byzantine_indirect_commits(&self) -> usize {
        self.epochs.iter().filter(|e| !e.leader_honest && e.committed.is_some() && !e.direct).count()
    }
}

pub fn metrics(trace: &Trace) -> Result<Metrics, TraceError> {
    let ix = Index::build(trace)?;
    let meta = ix.meta;
    let mut proposal_sent: BTreeMap<Epoch, Micros> = BTreeMap::new();
    let mut messages = 0u64;
    let mut bytes = 0u64;
    for rec in &trace.records {
        if let TraceEvent::Send { msg, size, to, .. } = &rec.event {
            messages += to.len() as u64;
            bytes += (*size * to.len()) as u64;
            if msg.is("PROPOSE") && rec.replica == Some(leader(msg.epoch, meta.n)) {
                proposal_sent.entry(msg.epoch).or_insert(rec.time);
            }
        }
    }
    let mut latencies = Vec::new();
    for (&e, &sent) in &proposal_sent {
        let l = leader(e, meta.n);
        if !meta.is_honest(l) {
            continue;
        }
        if let Some((t, _, _)) = ix.decisions.get(&l).and_then(|ds| ds.iter().find(|(_, ep, _)| *ep == e)) {
            latencies.push(t - sent);
        }
    }
    let committed_blocks = ix.commits.values().map(|c| c.len() as u64).max().unwrap_or(0);
    let last_commit = ix.commits.values().flatten().map(|c| c.time).max().unwrap_or(0);
    let throughput_bps = if last_commit == 0 { 0.0 } else { committed_blocks as f64 / (last_commit as f64 / 1e6) };

    let committed_ids: BTreeSet<BlockId> = ix.commits.values().flatten().map(|c| c.block).collect();
    let direct_ids: BTreeSet<BlockId> = ix.decisions.values().flatten().map(|(_, _, b)| *b).collect();
    let mut epochs = Vec::new();
    for e in 0..meta.epochs {
        let l = leader(e, meta.n);
        let certified: Vec<BlockId> = ix.block_certs.get(&e).map(|s| s.iter().copied().collect()).unwrap_or_default();
        let committed = committed_ids.iter().copied().find(|b| ix.proposal_epoch.get(b) == Some(&e));
        let decided = ix.decisions.values().flatten().any(|(_, ep, _)| *ep == e);
        let has = |k| ix.certs_by_kind.contains_key(&(e, k));
        let outcome = if decided {
            EpochOutcome::Committed
        } else if has(CertKind::Equiv) {
            EpochOutcome::Equivocation
        } else if has(CertKind::Silence) {
            EpochOutcome::Silence
        } else if !certified.is_empty() {
            EpochOutcome::Certified
        } else {
            EpochOutcome::Skipped
        };
        epochs.push(EpochSummary {
            epoch: e,
            leader: l,
            leader_honest: meta.is_honest(l),
            outcome,
            certified,
            direct: committed.is_some_and(|b| direct_ids.contains(&b)),
            committed,
        });
    }
    Ok(Metrics {
        latency: LatencySummary::from_micros(&latencies),
        committed_blocks,
        throughput_bps,
        messages,
        bytes,
        epochs,
    })
}
