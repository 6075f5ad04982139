//! Append-only execution trace, serialized as newline-delimited JSON.
//!
//! The first record of a trace is always `META`; a trace produced by a run
//! that drained its event queue ends with `END` and `complete: true`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{BlockId, CertKind, Epoch, Message, ReplicaId};

/// Simulated time in microseconds.
pub type Micros = u64;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum MsgClass {
    S,
    L,
}

impl MsgClass {
    /// Messages of at most `threshold` encoded bytes are small.
    pub fn classify(encoded_len: usize, threshold: usize) -> Self {
        if encoded_len <= threshold {
            MsgClass::S
        } else {
            MsgClass::L
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EpochState {
    Active,
    Committed,
    NotCommitted,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TimerKind {
    Certificate,
    Commit,
    EpochChange,
    /// Fallback for a replica holding a certificate from a later epoch
    /// while still waiting for one from its current epoch.
    CatchUp,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub struct TimerId {
    pub kind: TimerKind,
    pub epoch: Epoch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<BlockId>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochEntry {
    /// Regular start: timers armed, leader may propose.
    Normal,
    /// Jumped ahead on a certificate for a later epoch after waiting for
    /// the current epoch's certificate timed out.
    FastForward,
    /// Final configured epoch; the replica stops starting new work.
    Halt,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertSource {
    Votes,
    Silences,
    LeaderVotes,
    QuitEpoch,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct MsgSummary {
    #[serde(rename = "type")]
    pub kind: String,
    pub epoch: Epoch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<BlockId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signer: Option<ReplicaId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cert: Option<CertKind>,
}

impl MsgSummary {
    pub fn of(msg: &Message) -> Self {
        let (block, signer, cert) = match msg {
            Message::Propose(p) => (Some(p.block.id()), None, None),
            Message::Vote(v) => (Some(v.block_id), Some(v.signer), None),
            Message::Silence(s) => (None, Some(s.signer), None),
            Message::QuitEpoch(c) => (c.block_id(), None, Some(c.kind())),
        };
        Self { kind: msg.kind_name().to_string(), epoch: msg.epoch(), block, signer, cert }
    }

    pub fn is(&self, kind: &str) -> bool {
        self.kind == kind
    }
}

/// Run parameters needed by the offline checks.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct RunMeta {
    pub n: usize,
    pub f: usize,
    pub byzantine: Vec<ReplicaId>,
    pub adversary: String,
    pub delta_s: Micros,
    pub delta_l: Micros,
    /// `None` when large messages never stabilise.
    pub gst: Option<Micros>,
    pub start_stagger: Micros,
    pub small_threshold: usize,
    pub epochs: Epoch,
    pub fast_path: bool,
    pub seed: u64,
}

impl RunMeta {
    pub fn is_honest(&self, r: ReplicaId) -> bool {
        r.index() < self.n && !self.byzantine.contains(&r)
    }

    pub fn honest(&self) -> Vec<ReplicaId> {
        (0..self.n as u32).map(ReplicaId).filter(|r| self.is_honest(*r)).collect()
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TraceEvent {
    Meta(RunMeta),
    Send {
        msg: MsgSummary,
        class: MsgClass,
        size: usize,
        to: Vec<ReplicaId>,
    },
    Deliver {
        from: ReplicaId,
        msg: MsgSummary,
        class: MsgClass,
        size: usize,
        sent_at: Micros,
    },
    /// A message that will never be delivered within the run.
    Held {
        to: ReplicaId,
        msg: MsgSummary,
    },
    TimerStart {
        timer: TimerId,
        duration: Micros,
    },
    TimerFire {
        timer: TimerId,
    },
    EpochStart {
        epoch: Epoch,
        entry: EpochEntry,
    },
    Lock {
        cert_epoch: Epoch,
        block: BlockId,
        in_epoch: Epoch,
    },
    StateChange {
        epoch: Epoch,
        state: EpochState,
    },
    Decision {
        epoch: Epoch,
        block: BlockId,
    },
    Commit {
        epoch: Epoch,
        block: BlockId,
        height: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prev: Option<BlockId>,
        direct: bool,
    },
    /// Full block received and stored by a replica.
    Store {
        block: BlockId,
    },
    /// First appearance of a block anywhere in the run, with its content.
    Block {
        block: BlockId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prev: Option<BlockId>,
        /// Base64 payload.
        payload: String,
    },
    Cert {
        cert: CertKind,
        epoch: Epoch,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        block: Option<BlockId>,
        via: CertSource,
    },
    Rejected {
        reason: String,
        msg: MsgSummary,
    },
    Crash,
    End {
        complete: bool,
        reason: String,
    },
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: Micros,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replica: Option<ReplicaId>,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("trace does not start with a META record")]
    MissingMeta,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new(records: Vec<TraceRecord>) -> Self {
        Self { records }
    }

    pub fn meta(&self) -> Result<&RunMeta, TraceError> {
        match self.records.first().map(|r| &r.event) {
            Some(TraceEvent::Meta(m)) => Ok(m),
            _ => Err(TraceError::MissingMeta),
        }
    }

    /// Whether the producing run drained its queue (as opposed to hitting
    /// its time horizon or being cut short).
    pub fn is_complete(&self) -> bool {
        matches!(self.records.last().map(|r| &r.event), Some(TraceEvent::End { complete: true, .. }))
    }

    pub fn end_time(&self) -> Micros {
        self.records.last().map_or(0, |r| r.time)
    }

    pub fn by_replica(&self, r: ReplicaId) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |rec| rec.replica == Some(r))
    }

    pub fn write_ndjson<W: Write>(&self, mut w: W) -> Result<(), TraceError> {
        for rec in &self.records {
            serde_json::to_writer(&mut w, rec).map_err(|source| TraceError::Json { line: 0, source })?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_ndjson(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_ndjson(&mut out).expect("in-memory write");
        out
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Self, TraceError> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|source| TraceError::Json { line: i + 1, source })?;
            records.push(rec);
        }
        let t = Trace { records };
        t.meta()?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> RunMeta {
        RunMeta {
            n: 3,
            f: 1,
            byzantine: vec![ReplicaId(2)],
            adversary: "none".into(),
            delta_s: 100_000,
            delta_l: 500_000,
            gst: None,
            start_stagger: 0,
            small_threshold: 4096,
            epochs: 2,
            fast_path: true,
            seed: 1,
        }
    }

    #[test]
    fn classify_boundary_is_inclusive() {
        assert_eq!(MsgClass::classify(120, 4096), MsgClass::S);
        assert_eq!(MsgClass::classify(4096, 4096), MsgClass::S);
        assert_eq!(MsgClass::classify(4097, 4096), MsgClass::L);
        assert_eq!(MsgClass::classify(128 * 1024, 4096), MsgClass::L);
    }

    #[test]
    fn ndjson_round_trip_and_shape() {
        let id = BlockId([7; 32]);
        let t = Trace::new(vec![
            TraceRecord { time: 0, replica: None, event: TraceEvent::Meta(meta()) },
            TraceRecord {
                time: 5,
                replica: Some(ReplicaId(1)),
                event: TraceEvent::Commit { epoch: 0, block: id, height: 1, prev: None, direct: true },
            },
            TraceRecord {
                time: 6,
                replica: Some(ReplicaId(0)),
                event: TraceEvent::TimerStart {
                    timer: TimerId { kind: TimerKind::Commit, epoch: 0, block: Some(id) },
                    duration: 10,
                },
            },
            TraceRecord { time: 9, replica: None, event: TraceEvent::End { complete: true, reason: "drained".into() } },
        ]);
        let bytes = t.to_ndjson();
        let text = String::from_utf8(bytes.clone()).unwrap();
        let second = text.lines().nth(1).unwrap();
        assert!(second.contains(r#""kind":"COMMIT""#), "{second}");
        assert!(second.contains(r#""replica":1"#));
        let back = Trace::read_ndjson(&bytes[..]).unwrap();
        assert_eq!(back, t);
        assert!(back.is_complete());
        assert_eq!(back.meta().unwrap().honest(), vec![ReplicaId(0), ReplicaId(1)]);
    }

    #[test]
    fn missing_meta_rejected() {
        let line = br#"{"time":0,"replica":0,"kind":"CRASH"}"#;
        assert!(matches!(Trace::read_ndjson(&line[..]), Err(TraceError::MissingMeta)));
    }
}
