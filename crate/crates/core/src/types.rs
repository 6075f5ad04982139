//! Blocks, votes, certificates and protocol messages.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::codec::{put_bytes, put_u32, put_u64, CodecError, Decode, Encode, Reader};
use crate::crypto::{hash, Committee, KeyPair, Signature, SIGNATURE_LEN};

pub type Epoch = u64;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReplicaId(pub u32);

impl ReplicaId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Debug for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Round-robin leader rotation.
pub fn leader(epoch: Epoch, n: usize) -> ReplicaId {
    ReplicaId((epoch % n as u64) as u32)
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId(pub [u8; 32]);

impl BlockId {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(BlockId(out))
    }

    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.short())
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.short())
    }
}

impl Serialize for BlockId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for BlockId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        BlockId::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// A hash-linked block. The id is computed once at construction (or decode)
/// from the canonical encoding and never transmitted.
#[derive(Clone)]
pub struct Block {
    payload: Arc<[u8]>,
    prev: Option<BlockId>,
    id: BlockId,
}

impl Block {
    pub fn new(payload: impl Into<Arc<[u8]>>, prev: Option<BlockId>) -> Self {
        let payload = payload.into();
        let mut buf = Vec::with_capacity(payload.len() + 40);
        encode_block_fields(&payload, prev.as_ref(), &mut buf);
        let id = hash(&buf);
        Self { payload, prev, id }
    }

    pub fn id(&self) -> BlockId {
        self.id
    }

    pub fn prev(&self) -> Option<BlockId> {
        self.prev
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn payload_arc(&self) -> &Arc<[u8]> {
        &self.payload
    }

    pub fn is_genesis_rooted(&self) -> bool {
        self.prev.is_none()
    }
}

impl PartialEq for Block {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}

impl Eq for Block {}

impl fmt::Debug for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Block{{{} prev={:?} {}B}}", self.id, self.prev, self.payload.len())
    }
}

fn encode_block_fields(payload: &[u8], prev: Option<&BlockId>, out: &mut Vec<u8>) {
    put_bytes(out, payload);
    match prev {
        None => out.push(0),
        Some(p) => {
            out.push(1);
            out.extend_from_slice(&p.0);
        }
    }
}

impl Encode for Block {
    fn encode_to(&self, out: &mut Vec<u8>) {
        encode_block_fields(&self.payload, self.prev.as_ref(), out);
    }

    fn encoded_len_hint(&self) -> usize {
        self.payload.len() + 40
    }
}

impl Decode for Block {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let payload = r.bytes()?.to_vec();
        let prev = decode_opt_id(r)?;
        Ok(Block::new(payload, prev))
    }
}

fn decode_opt_id(r: &mut Reader<'_>) -> Result<Option<BlockId>, CodecError> {
    match r.u8()? {
        0 => Ok(None),
        1 => Ok(Some(BlockId(r.array()?))),
        _ => Err(CodecError::Invalid("option flag")),
    }
}

const VOTE_DOMAIN: u8 = 0x01;
const SILENCE_DOMAIN: u8 = 0x02;

fn vote_signing_bytes(epoch: Epoch, id: &BlockId) -> [u8; 41] {
    let mut b = [0u8; 41];
    b[0] = VOTE_DOMAIN;
    b[1..9].copy_from_slice(&epoch.to_be_bytes());
    b[9..].copy_from_slice(&id.0);
    b
}

fn silence_signing_bytes(epoch: Epoch) -> [u8; 9] {
    let mut b = [0u8; 9];
    b[0] = SILENCE_DOMAIN;
    b[1..].copy_from_slice(&epoch.to_be_bytes());
    b
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Vote {
    pub epoch: Epoch,
    pub block_id: BlockId,
    pub signer: ReplicaId,
    pub signature: Signature,
}

impl Vote {
    pub fn new(committee: &Committee, kp: &KeyPair, epoch: Epoch, block_id: BlockId) -> Self {
        let signature = committee.sign(kp, &vote_signing_bytes(epoch, &block_id));
        Self { epoch, block_id, signer: kp.owner, signature }
    }

    pub fn verify(&self, committee: &Committee) -> bool {
        committee.verify(self.signer, &vote_signing_bytes(self.epoch, &self.block_id), &self.signature)
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SilenceMsg {
    pub epoch: Epoch,
    pub signer: ReplicaId,
    pub signature: Signature,
}

impl SilenceMsg {
    pub fn new(committee: &Committee, kp: &KeyPair, epoch: Epoch) -> Self {
        Self { epoch, signer: kp.owner, signature: committee.sign(kp, &silence_signing_bytes(epoch)) }
    }

    pub fn verify(&self, committee: &Committee) -> bool {
        committee.verify(self.signer, &silence_signing_bytes(self.epoch), &self.signature)
    }
}

/// `f+1` votes from distinct replicas for one block in one epoch.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BlockCert {
    pub epoch: Epoch,
    pub block_id: BlockId,
    /// Sorted by signer.
    pub votes: Vec<Vote>,
}

impl BlockCert {
    /// Builds a certificate, sorting votes by signer.
    pub fn new(epoch: Epoch, block_id: BlockId, mut votes: Vec<Vote>) -> Self {
        votes.sort_by_key(|v| v.signer);
        Self { epoch, block_id, votes }
    }
}

/// Two leader-signed votes for different blocks in the same epoch.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct EquivCert {
    pub epoch: Epoch,
    pub vote_a: Vote,
    pub vote_b: Vote,
}

impl EquivCert {
    /// Orders the two votes by block id so equal evidence encodes identically.
    pub fn new(a: Vote, b: Vote) -> Self {
        let (vote_a, vote_b) = if a.block_id <= b.block_id { (a, b) } else { (b, a) };
        Self { epoch: vote_a.epoch, vote_a, vote_b }
    }
}

/// `f+1` silence messages from distinct replicas for one epoch.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SilenceCert {
    pub epoch: Epoch,
    /// Sorted by signer.
    pub msgs: Vec<SilenceMsg>,
}

impl SilenceCert {
    pub fn new(epoch: Epoch, mut msgs: Vec<SilenceMsg>) -> Self {
        msgs.sort_by_key(|m| m.signer);
        Self { epoch, msgs }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CertKind {
    Block,
    Equiv,
    Silence,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Certificate {
    Block(BlockCert),
    Equiv(EquivCert),
    Silence(SilenceCert),
}

impl Certificate {
    pub fn epoch(&self) -> Epoch {
        match self {
            Certificate::Block(c) => c.epoch,
            Certificate::Equiv(c) => c.epoch,
            Certificate::Silence(c) => c.epoch,
        }
    }

    pub fn kind(&self) -> CertKind {
        match self {
            Certificate::Block(_) => CertKind::Block,
            Certificate::Equiv(_) => CertKind::Equiv,
            Certificate::Silence(_) => CertKind::Silence,
        }
    }

    pub fn block_id(&self) -> Option<BlockId> {
        match self {
            Certificate::Block(c) => Some(c.block_id),
            _ => None,
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Proposal {
    pub epoch: Epoch,
    pub block: Block,
    pub justification: Option<BlockCert>,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Message {
    Propose(Proposal),
    Vote(Vote),
    Silence(SilenceMsg),
    QuitEpoch(Certificate),
}

impl Message {
    pub fn epoch(&self) -> Epoch {
        match self {
            Message::Propose(p) => p.epoch,
            Message::Vote(v) => v.epoch,
            Message::Silence(s) => s.epoch,
            Message::QuitEpoch(c) => c.epoch(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Message::Propose(_) => "PROPOSE",
            Message::Vote(_) => "VOTE",
            Message::Silence(_) => "SILENCE",
            Message::QuitEpoch(_) => "QUIT_EPOCH",
        }
    }

    /// Exact encoded size, without allocating the payload copy.
    pub fn encoded_len(&self) -> usize {
        match self {
            Message::Propose(p) => {
                let just = match &p.justification {
                    None => 1,
                    Some(c) => 1 + block_cert_body_len(c),
                };
                1 + 8 + 4 + p.block.payload().len() + 1 + if p.block.prev().is_some() { 32 } else { 0 } + just
            }
            _ => self.encode().len(),
        }
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Message::Propose(p) => write!(
                f,
                "PROPOSE(e={}, {}, prev={:?}, just={:?})",
                p.epoch,
                p.block.id(),
                p.block.prev(),
                p.justification.as_ref().map(|c| c.epoch)
            ),
            Message::Vote(v) => write!(f, "VOTE(e={}, {}, by {})", v.epoch, v.block_id, v.signer),
            Message::Silence(s) => write!(f, "SILENCE(e={}, by {})", s.epoch, s.signer),
            Message::QuitEpoch(c) => write!(f, "QUIT_EPOCH({:?} e={})", c.kind(), c.epoch()),
        }
    }
}

/// Compares certificates strictly by epoch.
pub fn certificate_recency(a: &BlockCert, b: &BlockCert) -> Ordering {
    a.epoch.cmp(&b.epoch)
}

/// Checks structure and every signature. Never panics on malformed input.
pub fn verify_certificate(cert: &Certificate, committee: &Committee) -> bool {
    let quorum = committee.quorum();
    match cert {
        Certificate::Block(c) => {
            c.votes.len() == quorum
                && strictly_increasing(c.votes.iter().map(|v| v.signer))
                && c.votes.iter().all(|v| {
                    v.epoch == c.epoch
                        && v.block_id == c.block_id
                        && committee.contains(v.signer)
                        && v.verify(committee)
                })
        }
        Certificate::Equiv(c) => {
            let lead = leader(c.epoch, committee.n());
            c.vote_a.epoch == c.epoch
                && c.vote_b.epoch == c.epoch
                && c.vote_a.signer == lead
                && c.vote_b.signer == lead
                && c.vote_a.block_id != c.vote_b.block_id
                && c.vote_a.verify(committee)
                && c.vote_b.verify(committee)
        }
        Certificate::Silence(c) => {
            c.msgs.len() == quorum
                && strictly_increasing(c.msgs.iter().map(|m| m.signer))
                && c.msgs.iter().all(|m| m.epoch == c.epoch && committee.contains(m.signer) && m.verify(committee))
        }
    }
}

fn strictly_increasing(mut it: impl Iterator<Item = ReplicaId>) -> bool {
    let Some(mut prev) = it.next() else {
        return true;
    };
    for x in it {
        if x <= prev {
            return false;
        }
        prev = x;
    }
    true
}

// ---- canonical encoding ----

const TAG_PROPOSE: u8 = 0x10;
const TAG_VOTE: u8 = 0x11;
const TAG_SILENCE: u8 = 0x12;
const TAG_QUIT: u8 = 0x13;
const TAG_CERT_BLOCK: u8 = 0x20;
const TAG_CERT_EQUIV: u8 = 0x21;
const TAG_CERT_SILENCE: u8 = 0x22;

fn block_cert_body_len(c: &BlockCert) -> usize {
    8 + 32 + 4 + c.votes.len() * (4 + SIGNATURE_LEN)
}

fn encode_vote_fields(v: &Vote, out: &mut Vec<u8>) {
    put_u64(out, v.epoch);
    out.extend_from_slice(&v.block_id.0);
    put_u32(out, v.signer.0);
    out.extend_from_slice(&v.signature.0);
}

fn decode_vote_fields(r: &mut Reader<'_>) -> Result<Vote, CodecError> {
    Ok(Vote {
        epoch: r.u64()?,
        block_id: BlockId(r.array()?),
        signer: ReplicaId(r.u32()?),
        signature: Signature(r.array()?),
    })
}

fn encode_block_cert_body(c: &BlockCert, out: &mut Vec<u8>) {
    put_u64(out, c.epoch);
    out.extend_from_slice(&c.block_id.0);
    put_u32(out, c.votes.len() as u32);
    for v in &c.votes {
        put_u32(out, v.signer.0);
        out.extend_from_slice(&v.signature.0);
    }
}

fn decode_signer_list(r: &mut Reader<'_>) -> Result<Vec<(ReplicaId, Signature)>, CodecError> {
    let count = r.u32()? as usize;
    // every entry is 68 bytes; refuse counts the input cannot hold
    let mut out = Vec::with_capacity(count.min(1024));
    let mut last: Option<ReplicaId> = None;
    for _ in 0..count {
        let signer = ReplicaId(r.u32()?);
        if last.is_some_and(|l| signer <= l) {
            return Err(CodecError::Invalid("signers not strictly increasing"));
        }
        last = Some(signer);
        out.push((signer, Signature(r.array()?)));
    }
    Ok(out)
}

fn decode_block_cert_body(r: &mut Reader<'_>) -> Result<BlockCert, CodecError> {
    let epoch = r.u64()?;
    let block_id = BlockId(r.array()?);
    let votes = decode_signer_list(r)?
        .into_iter()
        .map(|(signer, signature)| Vote { epoch, block_id, signer, signature })
        .collect();
    Ok(BlockCert { epoch, block_id, votes })
}

impl Encode for Vote {
    fn encode_to(&self, out: &mut Vec<u8>) {
        encode_vote_fields(self, out)
    }
}

impl Decode for Vote {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        decode_vote_fields(r)
    }
}

impl Encode for SilenceMsg {
    fn encode_to(&self, out: &mut Vec<u8>) {
        put_u64(out, self.epoch);
        put_u32(out, self.signer.0);
        out.extend_from_slice(&self.signature.0);
    }
}

impl Decode for SilenceMsg {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(SilenceMsg { epoch: r.u64()?, signer: ReplicaId(r.u32()?), signature: Signature(r.array()?) })
    }
}

impl Encode for BlockCert {
    fn encode_to(&self, out: &mut Vec<u8>) {
        encode_block_cert_body(self, out)
    }
}

impl Decode for BlockCert {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        decode_block_cert_body(r)
    }
}

impl Encode for Certificate {
    fn encode_to(&self, out: &mut Vec<u8>) {
        match self {
            Certificate::Block(c) => {
                out.push(TAG_CERT_BLOCK);
                encode_block_cert_body(c, out);
            }
            Certificate::Equiv(c) => {
                out.push(TAG_CERT_EQUIV);
                put_u64(out, c.epoch);
                for v in [&c.vote_a, &c.vote_b] {
                    out.extend_from_slice(&v.block_id.0);
                    put_u32(out, v.signer.0);
                    out.extend_from_slice(&v.signature.0);
                }
            }
            Certificate::Silence(c) => {
                out.push(TAG_CERT_SILENCE);
                put_u64(out, c.epoch);
                put_u32(out, c.msgs.len() as u32);
                for m in &c.msgs {
                    put_u32(out, m.signer.0);
                    out.extend_from_slice(&m.signature.0);
                }
            }
        }
    }
}

impl Decode for Certificate {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        match r.u8()? {
            TAG_CERT_BLOCK => Ok(Certificate::Block(decode_block_cert_body(r)?)),
            TAG_CERT_EQUIV => {
                let epoch = r.u64()?;
                let mut half = || -> Result<Vote, CodecError> {
                    Ok(Vote {
                        epoch,
                        block_id: BlockId(r.array()?),
                        signer: ReplicaId(r.u32()?),
                        signature: Signature(r.array()?),
                    })
                };
                let vote_a = half()?;
                let vote_b = half()?;
                if vote_a.block_id > vote_b.block_id {
                    return Err(CodecError::Invalid("equivocation votes out of order"));
                }
                Ok(Certificate::Equiv(EquivCert { epoch, vote_a, vote_b }))
            }
            TAG_CERT_SILENCE => {
                let epoch = r.u64()?;
                let msgs = decode_signer_list(r)?
                    .into_iter()
                    .map(|(signer, signature)| SilenceMsg { epoch, signer, signature })
                    .collect();
                Ok(Certificate::Silence(SilenceCert { epoch, msgs }))
            }
            tag => Err(CodecError::UnknownTag { what: "certificate", tag }),
        }
    }
}

impl Encode for Proposal {
    fn encode_to(&self, out: &mut Vec<u8>) {
        put_u64(out, self.epoch);
        self.block.encode_to(out);
        match &self.justification {
            None => out.push(0),
            Some(c) => {
                out.push(1);
                encode_block_cert_body(c, out);
            }
        }
    }

    fn encoded_len_hint(&self) -> usize {
        self.block.payload().len() + 256
    }
}

impl Decode for Proposal {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let epoch = r.u64()?;
        let block = Block::decode_from(r)?;
        let justification = match r.u8()? {
            0 => None,
            1 => Some(decode_block_cert_body(r)?),
            _ => return Err(CodecError::Invalid("option flag")),
        };
        Ok(Proposal { epoch, block, justification })
    }
}

impl Encode for Message {
    fn encode_to(&self, out: &mut Vec<u8>) {
        match self {
            Message::Propose(p) => {
                out.push(TAG_PROPOSE);
                p.encode_to(out);
            }
            Message::Vote(v) => {
                out.push(TAG_VOTE);
                v.encode_to(out);
            }
            Message::Silence(s) => {
                out.push(TAG_SILENCE);
                s.encode_to(out);
            }
            Message::QuitEpoch(c) => {
                out.push(TAG_QUIT);
                c.encode_to(out);
            }
        }
    }

    fn encoded_len_hint(&self) -> usize {
        match self {
            Message::Propose(p) => p.encoded_len_hint() + 1,
            _ => 512,
        }
    }
}

impl Decode for Message {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        match r.u8()? {
            TAG_PROPOSE => Ok(Message::Propose(Proposal::decode_from(r)?)),
            TAG_VOTE => Ok(Message::Vote(Vote::decode_from(r)?)),
            TAG_SILENCE => Ok(Message::Silence(SilenceMsg::decode_from(r)?)),
            TAG_QUIT => Ok(Message::QuitEpoch(Certificate::decode_from(r)?)),
            tag => Err(CodecError::UnknownTag { what: "message", tag }),
        }
    }
}

/// Encoded size of a `QUIT_EPOCH` carrying a block certificate with
/// `quorum` votes: a fixed header plus a constant per signer.
pub fn quit_epoch_block_cert_len(quorum: usize) -> usize {
    1 + 1 + 8 + 32 + 4 + quorum * (4 + SIGNATURE_LEN)
}
