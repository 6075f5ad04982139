//! Identities, signatures and hashing.
//!
//! Two signature schemes sit behind [`SignatureScheme`]: real Ed25519 and a
//! keyed-hash test scheme. Both produce 64-byte signatures so encoded message
//! sizes are identical whichever one a run uses.

use std::fmt;
use std::sync::Arc;

use ed25519_dalek::{Signer, Verifier};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256, Sha512};

use crate::types::{BlockId, ReplicaId};

pub const SIGNATURE_LEN: usize = 64;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Sig({}..)", hex::encode(&self.0[..4]))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct PublicKey(pub [u8; 32]);

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct SecretKey(pub [u8; 32]);

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

#[derive(Clone, Debug)]
pub struct KeyPair {
    pub public: PublicKey,
    pub secret: SecretKey,
    pub owner: ReplicaId,
}

pub trait SignatureScheme: Send + Sync + fmt::Debug {
    fn kind(&self) -> SchemeKind;
    fn keypair(&self, owner: ReplicaId, seed: [u8; 32]) -> KeyPair;
    fn sign(&self, secret: &SecretKey, msg: &[u8]) -> Signature;
    fn verify(&self, public: &PublicKey, msg: &[u8], sig: &Signature) -> bool;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Ed25519,
    /// Keyed SHA-512 over a per-signer test secret; the "public" key is the
    /// secret itself. Only meaningful inside a simulation where the adversary
    /// is code-controlled.
    #[default]
    TestMac,
}

impl SchemeKind {
    pub fn scheme(self) -> Arc<dyn SignatureScheme> {
        match self {
            SchemeKind::Ed25519 => Arc::new(Ed25519Scheme),
            SchemeKind::TestMac => Arc::new(TestMacScheme),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Ed25519Scheme;

impl SignatureScheme for Ed25519Scheme {
    fn kind(&self) -> SchemeKind {
        SchemeKind::Ed25519
    }

    fn keypair(&self, owner: ReplicaId, seed: [u8; 32]) -> KeyPair {
        let sk = ed25519_dalek::SigningKey::from_bytes(&seed);
        KeyPair { public: PublicKey(sk.verifying_key().to_bytes()), secret: SecretKey(seed), owner }
    }

    fn sign(&self, secret: &SecretKey, msg: &[u8]) -> Signature {
        let sk = ed25519_dalek::SigningKey::from_bytes(&secret.0);
        Signature(sk.sign(msg).to_bytes())
    }

    fn verify(&self, public: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
        let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&public.0) else {
            return false;
        };
        vk.verify(msg, &ed25519_dalek::Signature::from_bytes(&sig.0)).is_ok()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TestMacScheme;

impl TestMacScheme {
    fn mac(key: &[u8; 32], msg: &[u8]) -> [u8; SIGNATURE_LEN] {
        let mut h = Sha512::new();
        h.update(b"test-mac/v1");
        h.update(key);
        h.update(msg);
        h.finalize().into()
    }
}

impl SignatureScheme for TestMacScheme {
    fn kind(&self) -> SchemeKind {
        SchemeKind::TestMac
    }

    fn keypair(&self, owner: ReplicaId, seed: [u8; 32]) -> KeyPair {
        KeyPair { public: PublicKey(seed), secret: SecretKey(seed), owner }
    }

    fn sign(&self, secret: &SecretKey, msg: &[u8]) -> Signature {
        Signature(Self::mac(&secret.0, msg))
    }

    fn verify(&self, public: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
        Self::mac(&public.0, msg) == sig.0
    }
}

/// Collision-resistant digest used for block identifiers.
pub fn hash(bytes: &[u8]) -> BlockId {
    BlockId(Sha256::digest(bytes).into())
}

/// The public-key directory for a fixed set of `n` replicas tolerating `f`
/// faults.
#[derive(Debug, Clone)]
pub struct Committee {
    n: usize,
    f: usize,
    scheme: Arc<dyn SignatureScheme>,
    keys: Vec<PublicKey>,
}

impl Committee {
    pub fn new(f: usize, scheme: Arc<dyn SignatureScheme>, keys: Vec<PublicKey>) -> Self {
        Self { n: keys.len(), f, scheme, keys }
    }

    /// Deterministically derives one key pair per replica from `seed`.
    pub fn generate(n: usize, f: usize, scheme: Arc<dyn SignatureScheme>, seed: u64) -> (Self, Vec<KeyPair>) {
        let pairs: Vec<KeyPair> = (0..n)
            .map(|i| {
                let mut h = Sha256::new();
                h.update(b"replica-key");
                h.update(seed.to_be_bytes());
                h.update((i as u64).to_be_bytes());
                scheme.keypair(ReplicaId(i as u32), h.finalize().into())
            })
            .collect();
        let keys = pairs.iter().map(|k| k.public).collect();
        (Self::new(f, scheme, keys), pairs)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn f(&self) -> usize {
        self.f
    }

    /// Size of block and silence certificates.
    pub fn quorum(&self) -> usize {
        self.f + 1
    }

    pub fn scheme(&self) -> &Arc<dyn SignatureScheme> {
        &self.scheme
    }

    pub fn public_key(&self, id: ReplicaId) -> Option<&PublicKey> {
        self.keys.get(id.index())
    }

    pub fn contains(&self, id: ReplicaId) -> bool {
        id.index() < self.n
    }

    pub fn sign(&self, kp: &KeyPair, msg: &[u8]) -> Signature {
        self.scheme.sign(&kp.secret, msg)
    }

    pub fn verify(&self, signer: ReplicaId, msg: &[u8], sig: &Signature) -> bool {
        match self.public_key(signer) {
            Some(pk) => self.scheme.verify(pk, msg, sig),
            None => false,
        }
    }
}
