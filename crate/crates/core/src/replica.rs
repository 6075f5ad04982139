//! Deterministic replica state machine.
//!
//! A [`Replica`] never performs I/O. Every entry point returns the list of
//! [`Action`]s the environment must carry out: broadcasts, timers, commit
//! notifications and trace events. A replica's own broadcasts are applied to
//! its local state immediately, so the environment must not deliver them back.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use thiserror::Error;

use crate::app::{BlockValidity, PayloadSource};
use crate::crypto::{Committee, KeyPair};
use crate::trace::{CertSource, EpochEntry, EpochState, Micros, MsgClass, MsgSummary, TimerId, TimerKind, TraceEvent};
use crate::types::{
    leader, verify_certificate, Block, BlockCert, BlockId, CertKind, Certificate, Epoch, EquivCert, Message, Proposal,
    ReplicaId, SilenceCert, SilenceMsg, Vote,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolParams {
    pub delta_s: Micros,
    pub delta_l: Micros,
    pub fast_path: bool,
    pub small_threshold: usize,
    /// Entering this epoch halts the replica.
    pub last_epoch: Option<Epoch>,
}

impl ProtocolParams {
    pub fn certificate_timeout(&self) -> Micros {
        self.delta_l + 4 * self.delta_s
    }

    pub fn commit_wait(&self) -> Micros {
        2 * self.delta_s
    }

    pub fn epoch_change_wait(&self) -> Micros {
        2 * self.delta_s
    }
}

#[derive(Debug, Clone)]
pub enum Action {
    Broadcast {
        msg: Arc<Message>,
        class: MsgClass,
    },
    StartTimer {
        timer: TimerId,
        duration: Micros,
    },
    /// Decision for an epoch; the block itself may not be committed yet.
    Commit {
        epoch: Epoch,
        block: BlockId,
    },
    /// Blocks appended to the local ledger, oldest first.
    CommitBlocks(Vec<Block>),
    Trace(TraceEvent),
}

/// Certificates and fast-path triggers produced by adding one vote.
#[derive(Debug, Clone, Default)]
pub struct VoteOutcome {
    pub block_cert: Option<BlockCert>,
    pub equiv: Option<EquivCert>,
    pub all_votes: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReplicaError {
    #[error("cannot start epoch {requested} from {current:?}")]
    EpochOrder { current: Option<Epoch>, requested: Epoch },
    #[error("replica has not started")]
    NotStarted,
    #[error("not the leader of epoch {0}")]
    NotLeader(Epoch),
    #[error("already proposed in epoch {0}")]
    AlreadyProposed(Epoch),
    #[error("precondition violated: {0}")]
    Precondition(&'static str),
}

type CertKey = (CertKind, Epoch, Option<BlockId>);

fn cert_key(c: &Certificate) -> CertKey {
    (c.kind(), c.epoch(), c.block_id())
}

pub struct Replica {
    committee: Arc<Committee>,
    key: KeyPair,
    params: ProtocolParams,
    validity: Arc<dyn BlockValidity>,
    payloads: Box<dyn PayloadSource>,

    epoch: Epoch,
    started: bool,
    halted: bool,
    has_voted: bool,
    locked: Option<BlockCert>,
    states: BTreeMap<Epoch, EpochState>,
    decisions: BTreeMap<Epoch, BlockId>,
    store: HashMap<BlockId, Block>,

    votes: BTreeMap<(Epoch, BlockId), BTreeMap<ReplicaId, Vote>>,
    leader_votes: BTreeMap<Epoch, Vec<Vote>>,
    block_certs_formed: BTreeSet<(Epoch, BlockId)>,
    unanimous: BTreeSet<(Epoch, BlockId)>,
    equiv_formed: BTreeSet<Epoch>,
    silences: BTreeMap<Epoch, BTreeMap<ReplicaId, SilenceMsg>>,
    silence_formed: BTreeSet<Epoch>,
    proposals: BTreeMap<Epoch, Vec<Proposal>>,
    future_certs: BTreeMap<Epoch, Vec<Certificate>>,
    proposed: BTreeSet<Epoch>,
    forwarded: BTreeSet<BlockId>,
    rejected_blocks: BTreeSet<BlockId>,
    quit_sent: BTreeSet<(Epoch, CertKind)>,
    known_certs: BTreeSet<CertKey>,
    timers: BTreeMap<(TimerKind, Epoch), TimerId>,
    pending_commits: BTreeMap<Epoch, BlockId>,
    heights: HashMap<BlockId, u64>,
    chain: Vec<BlockId>,

    out: Vec<Action>,
}

impl std::fmt::Debug for Replica {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Replica")
            .field("id", &self.key.owner)
            .field("epoch", &self.epoch)
            .field("started", &self.started)
            .field("locked", &self.locked.as_ref().map(|c| (c.epoch, c.block_id)))
            .field("committed", &self.chain.len())
            .finish()
    }
}

impl Replica {
    pub fn new(
        committee: Arc<Committee>,
        key: KeyPair,
        params: ProtocolParams,
        validity: Arc<dyn BlockValidity>,
        payloads: Box<dyn PayloadSource>,
    ) -> Self {
        Self {
            committee,
            key,
            params,
            validity,
            payloads,
            epoch: 0,
            started: false,
            halted: false,
            has_voted: false,
            locked: None,
            states: BTreeMap::new(),
            decisions: BTreeMap::new(),
            store: HashMap::new(),
            votes: BTreeMap::new(),
            leader_votes: BTreeMap::new(),
            block_certs_formed: BTreeSet::new(),
            unanimous: BTreeSet::new(),
            equiv_formed: BTreeSet::new(),
            silences: BTreeMap::new(),
            silence_formed: BTreeSet::new(),
            proposals: BTreeMap::new(),
            future_certs: BTreeMap::new(),
            proposed: BTreeSet::new(),
            forwarded: BTreeSet::new(),
            rejected_blocks: BTreeSet::new(),
            quit_sent: BTreeSet::new(),
            known_certs: BTreeSet::new(),
            timers: BTreeMap::new(),
            pending_commits: BTreeMap::new(),
            heights: HashMap::new(),
            chain: Vec::new(),
            out: Vec::new(),
        }
    }

    // ---- read-only view ----

    pub fn id(&self) -> ReplicaId {
        self.key.owner
    }

    /// Current epoch, `None` before the replica starts.
    pub fn epoch(&self) -> Option<Epoch> {
        self.started.then_some(self.epoch)
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn has_voted(&self) -> bool {
        self.has_voted
    }

    pub fn locked_cert(&self) -> Option<&BlockCert> {
        self.locked.as_ref()
    }

    pub fn epoch_state(&self, e: Epoch) -> Option<EpochState> {
        self.states.get(&e).copied()
    }

    pub fn decision(&self, e: Epoch) -> Option<BlockId> {
        self.decisions.get(&e).copied()
    }

    pub fn block(&self, id: &BlockId) -> Option<&Block> {
        self.store.get(id)
    }

    /// Committed block ids in ledger order.
    pub fn committed_chain(&self) -> &[BlockId] {
        &self.chain
    }

    pub fn pending_timers(&self) -> impl Iterator<Item = &TimerId> {
        self.timers.values()
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.params
    }

    fn n(&self) -> usize {
        self.committee.n()
    }

    fn current(&self, e: Epoch) -> bool {
        self.started && e == self.epoch
    }

    fn is_future(&self, e: Epoch) -> bool {
        !self.started || e > self.epoch
    }

    fn beyond_horizon(&self, e: Epoch) -> bool {
        self.params.last_epoch.is_some_and(|last| e >= last)
    }

    // ---- environment entry points ----

    /// Starts epoch 0 unless a certificate already moved the replica ahead.
    pub fn bootstrap(&mut self) -> Vec<Action> {
        if !self.started {
            self.start_epoch_in(0, EpochEntry::Normal);
            self.replay_future();
        }
        self.drain()
    }

    pub fn on_message(&mut self, msg: &Message) -> Vec<Action> {
        match msg {
            Message::Vote(v) => self.receive_vote(v),
            Message::Silence(s) => self.receive_silence(s),
            Message::Propose(p) => self.receive_proposal(p),
            Message::QuitEpoch(c) => self.receive_quit(c),
        }
        self.drain()
    }

    pub fn on_timer(&mut self, timer: TimerId) -> Vec<Action> {
        if self.timers.get(&(timer.kind, timer.epoch)) == Some(&timer) {
            self.timers.remove(&(timer.kind, timer.epoch));
            match timer.kind {
                TimerKind::Certificate => self.on_certificate_timer_in(timer.epoch),
                TimerKind::Commit => self.on_commit_timer_in(timer.epoch, timer.block),
                TimerKind::CatchUp => self.on_catch_up_in(timer.epoch),
                TimerKind::EpochChange => {
                    if self.current(timer.epoch)
                        && !self.halted
                        && leader(timer.epoch, self.n()) == self.id()
                        && !self.proposed.contains(&timer.epoch)
                    {
                        self.propose_in();
                    }
                }
            }
        }
        self.drain()
    }

    // ---- protocol operations ----

    pub fn start_epoch(&mut self, e: Epoch) -> Result<Vec<Action>, ReplicaError> {
        let ok = if self.started { e == self.epoch + 1 } else { e == 0 };
        if !ok {
            return Err(ReplicaError::EpochOrder { current: self.epoch(), requested: e });
        }
        self.start_epoch_in(e, EpochEntry::Normal);
        Ok(self.drain())
    }

    pub fn propose(&mut self) -> Result<Vec<Action>, ReplicaError> {
        if !self.started {
            return Err(ReplicaError::NotStarted);
        }
        if leader(self.epoch, self.n()) != self.id() {
            return Err(ReplicaError::NotLeader(self.epoch));
        }
        if self.proposed.contains(&self.epoch) {
            return Err(ReplicaError::AlreadyProposed(self.epoch));
        }
        self.propose_in();
        Ok(self.drain())
    }

    /// Handles a proposal together with the leader's vote for it.
    pub fn on_proposal(&mut self, p: &Proposal, leader_vote: &Vote) -> Result<Vec<Action>, ReplicaError> {
        if !self.current(p.epoch) {
            return Err(ReplicaError::Precondition("proposal is not for the current epoch"));
        }
        if leader_vote.epoch != p.epoch
            || leader_vote.block_id != p.block.id()
            || leader_vote.signer != leader(p.epoch, self.n())
            || !leader_vote.verify(&self.committee)
        {
            return Err(ReplicaError::Precondition("leader vote does not match proposal"));
        }
        self.store_block_in(&p.block);
        self.on_proposal_in(p, leader_vote);
        Ok(self.drain())
    }

    /// Adds a vote to the index and reports any certificate it completes.
    /// Each certificate is reported once.
    pub fn accumulate_vote(&mut self, v: Vote) -> VoteOutcome {
        let mut out = VoteOutcome::default();
        let (e, id) = (v.epoch, v.block_id);
        let q = self.committee.quorum();
        let n = self.n();
        if v.signer == leader(e, n) {
            let lv = self.leader_votes.entry(e).or_default();
            if !lv.iter().any(|x| x.block_id == id) {
                lv.push(v.clone());
                if lv.len() >= 2 && self.equiv_formed.insert(e) {
                    out.equiv = Some(EquivCert::new(lv[0].clone(), lv[1].clone()));
                }
            }
        }
        let entry = self.votes.entry((e, id)).or_default();
        if entry.contains_key(&v.signer) {
            return out;
        }
        entry.insert(v.signer, v);
        if entry.len() >= q && self.block_certs_formed.insert((e, id)) {
            let votes = entry.values().take(q).cloned().collect();
            out.block_cert = Some(BlockCert::new(e, id, votes));
        }
        if entry.len() == n && self.unanimous.insert((e, id)) {
            out.all_votes = true;
        }
        out
    }

    pub fn on_block_certificate(&mut self, cert: BlockCert) -> Vec<Action> {
        self.on_block_certificate_in(cert);
        self.drain()
    }

    pub fn on_commit_timer(&mut self, e: Epoch, block: Option<BlockId>) -> Vec<Action> {
        self.on_commit_timer_in(e, block);
        self.drain()
    }

    pub fn on_all_votes(&mut self, e: Epoch, block: BlockId) -> Vec<Action> {
        self.on_all_votes_in(e, block);
        self.drain()
    }

    pub fn on_misbehavior(&mut self, cert: Certificate) -> Vec<Action> {
        self.on_misbehavior_in(cert);
        self.drain()
    }

    pub fn on_certificate_timer(&mut self, e: Epoch) -> Vec<Action> {
        self.on_certificate_timer_in(e);
        self.drain()
    }

    /// Adds a silence message; returns a certificate the first time `f+1`
    /// distinct signers are reached for the epoch.
    pub fn accumulate_silence(&mut self, s: SilenceMsg) -> Option<SilenceCert> {
        let q = self.committee.quorum();
        let e = s.epoch;
        let entry = self.silences.entry(e).or_default();
        entry.entry(s.signer).or_insert(s);
        if entry.len() >= q && self.silence_formed.insert(e) {
            return Some(SilenceCert::new(e, entry.values().take(q).cloned().collect()));
        }
        None
    }

    pub fn on_stored_block(&mut self, block: &Block) -> Vec<Action> {
        self.store_block_in(block);
        self.drain()
    }

    // ---- internals ----

    fn drain(&mut self) -> Vec<Action> {
        std::mem::take(&mut self.out)
    }

    fn trace(&mut self, ev: TraceEvent) {
        self.out.push(Action::Trace(ev));
    }

    fn broadcast(&mut self, msg: Message) {
        let class = MsgClass::classify(msg.encoded_len(), self.params.small_threshold);
        self.out.push(Action::Broadcast { msg: Arc::new(msg), class });
    }

    fn reject(&mut self, reason: &str, msg: &Message) {
        self.trace(TraceEvent::Rejected { reason: reason.to_string(), msg: MsgSummary::of(msg) });
    }

    fn start_timer(&mut self, kind: TimerKind, epoch: Epoch, block: Option<BlockId>, duration: Micros) {
        if self.timers.contains_key(&(kind, epoch)) {
            return;
        }
        let timer = TimerId { kind, epoch, block };
        self.timers.insert((kind, epoch), timer);
        self.trace(TraceEvent::TimerStart { timer, duration });
        self.out.push(Action::StartTimer { timer, duration });
    }

    fn set_state(&mut self, e: Epoch, state: EpochState) {
        self.states.insert(e, state);
        self.trace(TraceEvent::StateChange { epoch: e, state });
    }

    fn lock(&mut self, cert: BlockCert) {
        self.trace(TraceEvent::Lock { cert_epoch: cert.epoch, block: cert.block_id, in_epoch: self.epoch });
        self.locked = Some(cert);
    }

    fn learn_cert(&mut self, cert: &Certificate, via: CertSource) {
        if self.known_certs.insert(cert_key(cert)) {
            self.trace(TraceEvent::Cert { cert: cert.kind(), epoch: cert.epoch(), block: cert.block_id(), via });
        }
    }

    fn enter_epoch(&mut self, e: Epoch, entry: EpochEntry) {
        self.epoch = e;
        self.started = true;
        self.has_voted = false;
        self.states.entry(e).or_insert(EpochState::Active);
        let entry = if self.params.last_epoch == Some(e) {
            self.halted = true;
            EpochEntry::Halt
        } else {
            entry
        };
        self.trace(TraceEvent::EpochStart { epoch: e, entry });
    }

    fn start_epoch_in(&mut self, e: Epoch, entry: EpochEntry) {
        self.enter_epoch(e, entry);
        if self.halted {
            return;
        }
        self.start_timer(TimerKind::Certificate, e, None, self.params.certificate_timeout());
        if leader(e, self.n()) == self.id() {
            let prev_locked = self.locked.as_ref().is_some_and(|c| c.epoch + 1 == e);
            if e == 0 || prev_locked {
                self.propose_in();
            } else {
                self.start_timer(TimerKind::EpochChange, e, None, self.params.epoch_change_wait());
            }
        }
        self.try_vote();
        self.replay_future();
    }

    /// Holds a certificate from a later epoch until the current epoch ends,
    /// so that the current epoch's certificate (normally at most one small
    /// delay behind) is still processed in order.
    fn defer(&mut self, cert: Certificate) {
        let list = self.future_certs.entry(cert.epoch()).or_default();
        if !list.iter().any(|c| cert_key(c) == cert_key(&cert)) {
            list.push(cert);
        }
        if self.started && !self.halted {
            self.start_timer(TimerKind::CatchUp, self.epoch, None, self.params.delta_s);
        }
    }

    fn replay_future(&mut self) {
        if !self.started || self.halted {
            return;
        }
        let stale: Vec<Epoch> = self.future_certs.range(..=self.epoch).map(|(e, _)| *e).collect();
        for e in stale {
            for cert in self.future_certs.remove(&e).unwrap_or_default() {
                match cert {
                    Certificate::Block(bc) => self.on_block_certificate_in(bc),
                    other => self.on_misbehavior_in(other),
                }
            }
        }
        if !self.future_certs.is_empty() && !self.halted {
            self.start_timer(TimerKind::CatchUp, self.epoch, None, self.params.delta_s);
        }
    }

    /// The current epoch's certificate never showed up: jump to the
    /// earliest epoch we hold a certificate for.
    fn on_catch_up_in(&mut self, e: Epoch) {
        if !self.current(e) || self.halted {
            return;
        }
        let Some(&next) = self.future_certs.keys().find(|&&k| k > e) else {
            return;
        };
        self.enter_epoch(next, EpochEntry::FastForward);
        self.replay_future();
    }

    fn propose_in(&mut self) {
        let e = self.epoch;
        if !self.proposed.insert(e) {
            return;
        }
        let payload = self.payloads.next_payload(e, self.id());
        let justification = self.locked.clone();
        let block = Block::new(payload, justification.as_ref().map(|c| c.block_id));
        let id = block.id();
        let proposal = Proposal { epoch: e, block: block.clone(), justification };
        let vote = Vote::new(&self.committee, &self.key, e, id);
        self.broadcast(Message::Propose(proposal.clone()));
        self.broadcast(Message::Vote(vote.clone()));
        self.has_voted = true;
        self.forwarded.insert(id);
        self.store_block_in(&block);
        self.proposals.entry(e).or_default().push(proposal);
        self.process_vote(vote);
    }

    fn receive_vote(&mut self, v: &Vote) {
        let dup = self
            .votes
            .get(&(v.epoch, v.block_id))
            .and_then(|m| m.get(&v.signer))
            .is_some_and(|known| known.signature == v.signature);
        if dup {
            return;
        }
        if !v.verify(&self.committee) {
            self.reject("bad vote signature", &Message::Vote(v.clone()));
            return;
        }
        self.process_vote(v.clone());
    }

    fn process_vote(&mut self, v: Vote) {
        let (e, id) = (v.epoch, v.block_id);
        let from_leader = v.signer == leader(e, self.n());
        let outcome = self.accumulate_vote(v);
        if let Some(eq) = outcome.equiv {
            let cert = Certificate::Equiv(eq);
            self.learn_cert(&cert, CertSource::LeaderVotes);
            self.on_misbehavior_in(cert);
        }
        if from_leader {
            self.try_vote();
        }
        if let Some(bc) = outcome.block_cert {
            self.learn_cert(&Certificate::Block(bc.clone()), CertSource::Votes);
            self.on_block_certificate_in(bc);
        }
        if outcome.all_votes && self.params.fast_path {
            self.on_all_votes_in(e, id);
        }
    }

    fn receive_silence(&mut self, s: &SilenceMsg) {
        let dup = self.silences.get(&s.epoch).is_some_and(|m| m.contains_key(&s.signer));
        if dup {
            return;
        }
        if !s.verify(&self.committee) {
            self.reject("bad silence signature", &Message::Silence(s.clone()));
            return;
        }
        self.process_silence(s.clone());
    }

    fn process_silence(&mut self, s: SilenceMsg) {
        if let Some(cert) = self.accumulate_silence(s) {
            let cert = Certificate::Silence(cert);
            self.learn_cert(&cert, CertSource::Silences);
            self.on_misbehavior_in(cert);
        }
    }

    fn receive_proposal(&mut self, p: &Proposal) {
        self.store_block_in(&p.block);
        let e = p.epoch;
        if self.started && e < self.epoch {
            return;
        }
        let list = self.proposals.entry(e).or_default();
        if !list.iter().any(|x| x.block.id() == p.block.id()) {
            list.push(p.clone());
        }
        if self.current(e) {
            self.try_vote();
        }
    }

    fn receive_quit(&mut self, c: &Certificate) {
        if !self.known_certs.contains(&cert_key(c)) {
            if !verify_certificate(c, &self.committee) {
                self.reject("invalid certificate", &Message::QuitEpoch(c.clone()));
                return;
            }
            self.learn_cert(c, CertSource::QuitEpoch);
        }
        match c {
            Certificate::Block(bc) => self.on_block_certificate_in(bc.clone()),
            other => self.on_misbehavior_in(other.clone()),
        }
    }

    /// Votes for the first buffered proposal of the current epoch whose
    /// leader vote has arrived and which passes the voting rule.
    fn try_vote(&mut self) {
        if !self.started || self.halted || self.has_voted {
            return;
        }
        let e = self.epoch;
        if self.states.get(&e) != Some(&EpochState::Active) {
            return;
        }
        let lead = leader(e, self.n());
        let Some(list) = self.proposals.get(&e) else {
            return;
        };
        let candidates: Vec<(Proposal, Vote)> = list
            .iter()
            .filter_map(|p| {
                let lv = self.votes.get(&(e, p.block.id()))?.get(&lead)?;
                Some((p.clone(), lv.clone()))
            })
            .collect();
        for (p, lv) in candidates {
            self.on_proposal_in(&p, &lv);
            if self.has_voted {
                break;
            }
        }
    }

    fn proposal_valid(&mut self, p: &Proposal) -> bool {
        let structural = match (&p.justification, p.block.prev()) {
            (None, None) => true,
            (Some(j), Some(prev)) => {
                j.block_id == prev && j.epoch < p.epoch && {
                    let cert = Certificate::Block(j.clone());
                    if self.known_certs.contains(&cert_key(&cert)) {
                        true
                    } else if verify_certificate(&cert, &self.committee) {
                        self.learn_cert(&cert, CertSource::QuitEpoch);
                        true
                    } else {
                        false
                    }
                }
            }
            _ => false,
        };
        structural && self.validity.valid(&p.block)
    }

    fn on_proposal_in(&mut self, p: &Proposal, lv: &Vote) {
        let e = p.epoch;
        if !self.current(e) || self.halted || self.states.get(&e) != Some(&EpochState::Active) {
            return;
        }
        let id = p.block.id();
        if !self.proposal_valid(p) {
            if self.rejected_blocks.insert(id) {
                self.reject("invalid proposal", &Message::Propose(p.clone()));
            }
            return;
        }
        if self.has_voted {
            return;
        }
        let extends_lock = match (&self.locked, &p.justification) {
            (None, _) => true,
            (Some(l), Some(j)) => j.epoch >= l.epoch,
            (Some(_), None) => false,
        };
        if !extends_lock {
            return;
        }
        let vote = Vote::new(&self.committee, &self.key, e, id);
        self.broadcast(Message::Vote(vote.clone()));
        self.has_voted = true;
        if self.forwarded.insert(id) {
            self.broadcast(Message::Vote(lv.clone()));
            self.broadcast(Message::Propose(p.clone()));
        }
        self.process_vote(vote);
    }

    fn broadcast_quit(&mut self, cert: Certificate) {
        if self.quit_sent.insert((cert.epoch(), cert.kind())) {
            self.broadcast(Message::QuitEpoch(cert));
        }
    }

    fn on_block_certificate_in(&mut self, cert: BlockCert) {
        let e = cert.epoch;
        if self.beyond_horizon(e) {
            return;
        }
        if self.is_future(e) {
            self.defer(Certificate::Block(cert));
            return;
        }
        if e == self.epoch {
            let id = cert.block_id;
            self.lock(cert.clone());
            if self.states.get(&e) == Some(&EpochState::Active) {
                self.start_timer(TimerKind::Commit, e, Some(id), self.params.commit_wait());
            }
            self.broadcast_quit(Certificate::Block(cert));
            self.start_epoch_in(e + 1, EpochEntry::Normal);
        } else if !self.halted
            && leader(self.epoch, self.n()) == self.id()
            && self.locked.as_ref().is_none_or(|l| e > l.epoch)
        {
            self.lock(cert.clone());
            self.broadcast_quit(Certificate::Block(cert));
        }
    }

    fn on_commit_timer_in(&mut self, e: Epoch, block: Option<BlockId>) {
        match block {
            Some(id) => {
                if self.states.get(&e) == Some(&EpochState::Active) {
                    self.decide(e, id);
                }
            }
            None => {
                if self.current(e) {
                    self.start_epoch_in(e + 1, EpochEntry::Normal);
                }
            }
        }
    }

    fn on_all_votes_in(&mut self, e: Epoch, id: BlockId) {
        if self.states.get(&e) == Some(&EpochState::Active) {
            self.decide(e, id);
        }
    }

    fn on_misbehavior_in(&mut self, cert: Certificate) {
        let e = cert.epoch();
        if self.beyond_horizon(e) {
            return;
        }
        if self.is_future(e) {
            self.defer(cert);
            return;
        }
        if self.states.get(&e) != Some(&EpochState::Active) {
            return;
        }
        self.set_state(e, EpochState::NotCommitted);
        if e == self.epoch {
            self.broadcast_quit(cert);
            if self.params.fast_path {
                self.start_timer(TimerKind::Commit, e, None, self.params.commit_wait());
            } else {
                // Without the fast path nobody can commit this epoch after
                // seeing the evidence, so there is nothing to wait for.
                self.start_epoch_in(e + 1, EpochEntry::Normal);
            }
        }
    }

    fn on_certificate_timer_in(&mut self, e: Epoch) {
        if self.current(e) && !self.halted && self.states.get(&e) == Some(&EpochState::Active) {
            let s = SilenceMsg::new(&self.committee, &self.key, e);
            self.broadcast(Message::Silence(s.clone()));
            self.process_silence(s);
        }
    }

    fn decide(&mut self, e: Epoch, id: BlockId) {
        self.set_state(e, EpochState::Committed);
        self.decisions.insert(e, id);
        self.trace(TraceEvent::Decision { epoch: e, block: id });
        self.out.push(Action::Commit { epoch: e, block: id });
        self.pending_commits.insert(e, id);
        self.try_commit_pending();
    }

    fn store_block_in(&mut self, block: &Block) {
        let id = block.id();
        if self.store.contains_key(&id) {
            return;
        }
        self.store.insert(id, block.clone());
        self.trace(TraceEvent::Store { block: id });
        if !self.pending_commits.is_empty() {
            self.try_commit_pending();
        }
    }

    /// Uncommitted ancestors of `id` (inclusive), oldest first, or `None`
    /// if some block on the way is not stored yet.
    fn uncommitted_ancestry(&self, id: BlockId) -> Option<Vec<Block>> {
        let mut path = Vec::new();
        let mut cur = Some(id);
        while let Some(c) = cur {
            if self.heights.contains_key(&c) {
                break;
            }
            let b = self.store.get(&c)?;
            path.push(b.clone());
            cur = b.prev();
        }
        path.reverse();
        Some(path)
    }

    fn try_commit_pending(&mut self) {
        let pending: Vec<(Epoch, BlockId)> = self.pending_commits.iter().map(|(e, id)| (*e, *id)).collect();
        for (e, id) in pending {
            if self.heights.contains_key(&id) {
                self.pending_commits.remove(&e);
                continue;
            }
            if let Some(path) = self.uncommitted_ancestry(id) {
                self.pending_commits.remove(&e);
                for b in &path {
                    let height = b.prev().map_or(0, |p| self.heights[&p]) + 1;
                    self.heights.insert(b.id(), height);
                    self.chain.push(b.id());
                    self.trace(TraceEvent::Commit {
                        epoch: e,
                        block: b.id(),
                        height,
                        prev: b.prev(),
                        direct: b.id() == id,
                    });
                }
                self.out.push(Action::CommitBlocks(path));
            }
        }
    }
}
