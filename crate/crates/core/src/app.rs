//! Application hooks: what goes into a block and what counts as a valid one.
//!
//! The built-in application fills payloads with seeded pseudo-random bytes
//! and appends an 8-byte SHA-256 checksum of the body. A block is valid when
//! the checksum matches.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::types::{Block, Epoch, ReplicaId};

pub const CHECKSUM_LEN: usize = 8;

pub trait BlockValidity: Send + Sync {
    fn valid(&self, block: &Block) -> bool;
}

pub trait PayloadSource: Send {
    fn next_payload(&mut self, epoch: Epoch, proposer: ReplicaId) -> Vec<u8>;
}

fn checksum(body: &[u8]) -> [u8; CHECKSUM_LEN] {
    let d = Sha256::digest(body);
    let mut out = [0; CHECKSUM_LEN];
    out.copy_from_slice(&d[..CHECKSUM_LEN]);
    out
}

/// Appends the checksum to `body`.
pub fn seal_payload(mut body: Vec<u8>) -> Vec<u8> {
    let c = checksum(&body);
    body.extend_from_slice(&c);
    body
}

/// Deterministic sealed payload of exactly `size` bytes (at least the
/// checksum length).
pub fn seeded_payload(size: usize, salt: u64, epoch: Epoch, proposer: ReplicaId) -> Vec<u8> {
    let body_len = size.saturating_sub(CHECKSUM_LEN);
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&salt.to_be_bytes());
    seed[8..16].copy_from_slice(&epoch.to_be_bytes());
    seed[16..20].copy_from_slice(&proposer.0.to_be_bytes());
    let mut body = vec![0u8; body_len];
    ChaCha8Rng::from_seed(seed).fill_bytes(&mut body);
    seal_payload(body)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ChecksumValidity;

impl BlockValidity for ChecksumValidity {
    fn valid(&self, block: &Block) -> bool {
        let p = block.payload();
        if p.len() < CHECKSUM_LEN {
            return false;
        }
        let (body, tail) = p.split_at(p.len() - CHECKSUM_LEN);
        checksum(body) == tail
    }
}

#[derive(Debug, Clone)]
pub struct SeededPayloads {
    pub size: usize,
    pub salt: u64,
}

impl PayloadSource for SeededPayloads {
    fn next_payload(&mut self, epoch: Epoch, proposer: ReplicaId) -> Vec<u8> {
        seeded_payload(self.size, self.salt, epoch, proposer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sealed_payload_is_valid_and_tamper_evident() {
        let p = seeded_payload(1024, 1, 3, ReplicaId(2));
        assert_eq!(p.len(), 1024);
        assert!(ChecksumValidity.valid(&Block::new(p.clone(), None)));
        let mut bad = p.clone();
        bad[10] ^= 1;
        assert!(!ChecksumValidity.valid(&Block::new(bad, None)));
        assert!(!ChecksumValidity.valid(&Block::new(vec![1, 2, 3], None)));
    }

    #[test]
    fn payloads_differ_by_epoch_and_salt() {
        let a = seeded_payload(64, 1, 3, ReplicaId(2));
        assert_eq!(a, seeded_payload(64, 1, 3, ReplicaId(2)));
        assert_ne!(a, seeded_payload(64, 1, 4, ReplicaId(2)));
        assert_ne!(a, seeded_payload(64, 2, 3, ReplicaId(2)));
        assert_eq!(seeded_payload(8, 0, 0, ReplicaId(0)).len(), 8);
    }
}
