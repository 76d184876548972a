//! Seeded deterministic randomness.
//!
//! Every stochastic component draws from a ChaCha8 stream whose 256-bit seed
//! is derived from a master seed by hashing domain-separation labels. Child
//! streams are therefore independent of sibling order: adding a client or an
//! epoch never perturbs another stream's draws.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

pub type DetRng = ChaCha8Rng;

/// Expands a configuration-level u64 seed into a master seed.
pub fn master_seed(seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"nqc/master/v1");
    h.update(seed.to_le_bytes());
    h.finalize().into()
}

/// Derives a child seed from `parent` and a label path. Each label is
/// length-prefixed so distinct paths can never collide by concatenation.
pub fn child_seed(parent: &[u8; 32], labels: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"nqc/child/v1");
    h.update(parent);
    for label in labels {
        h.update((label.len() as u64).to_le_bytes());
        h.update(label);
    }
    h.finalize().into()
}

/// Deterministic RNG for a child stream.
pub fn stream(parent: &[u8; 32], labels: &[&[u8]]) -> DetRng {
    ChaCha8Rng::from_seed(child_seed(parent, labels))
}

/// Deterministic RNG straight from a u64 seed (single-stream operations).
pub fn from_u64(seed: u64) -> DetRng {
    ChaCha8Rng::from_seed(master_seed(seed))
}
