//! Classical post-processing: sifting, shuffling, QBER estimation,
//! decoy-state bounds, LDPC reconciliation, Toeplitz privacy
//! amplification, and transcript authentication.
//!
//! Every operation is a pure function over session data; the only state a
//! caller threads through is the [`LeakageLedger`], which tallies each bit
//! disclosed on the classical channel so the final key length can subtract
//! it.

mod auth;
mod decoy;
mod ldpc;
mod sift;
mod toeplitz;

pub use auth::{authenticate, verify_tag, AuthKey};
pub use decoy::{decoy_bounds, DecoyBounds, DecoyStats};
pub use ldpc::{
    code_for, reconcile, LdpcCode, ReconcileOutcome, CODE_RATES, MAX_CODE_LEN, MIN_CODE_LEN,
};
pub use sift::{collect_decoy_stats, estimate_qber, shuffle, sift, unshuffle};
pub use toeplitz::privacy_amplify;

use crate::bits::BitString;
use crate::photonic::DecoyLevel;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PostprocError {
    #[error("sample fraction must lie in (0, 1), got {0}")]
    SampleFraction(f64),
    #[error("sample size is zero for a block of {block_len} bits at fraction {fraction}")]
    EmptySample { block_len: usize, fraction: f64 },
    #[error("decoy statistics violate a precondition: {0}")]
    DecoyPrecondition(&'static str),
    #[error("qber hint {0} outside [0, 0.11)")]
    QberHintRange(f64),
    #[error("reconciliation verification hash mismatch; block must be discarded ({leaked_bits} bits were disclosed)")]
    ReconcileVerification { leaked_bits: u64 },
    #[error("toeplitz seed must be {expected} bits, got {got}")]
    SeedLength { expected: usize, got: usize },
    #[error("output length {out_len} exceeds input length {key_len}")]
    OutLenRange { out_len: usize, key_len: usize },
    #[error("authentication key must provide at least 128 bits, got {0}")]
    AuthKeyLength(usize),
    #[error("secret key block length {0} is not a multiple of 256")]
    KeyBlockAlignment(usize),
}

/// Basis-sifted key material for one session, bit-aligned across the
/// client string, the hub string, and the per-bit annotations.
///
/// Freshly sifted blocks carry a strictly increasing `slot_map`; after
/// [`shuffle`] the same permutation has been applied to every column, so
/// the map still identifies each bit's origin slot but is no longer
/// sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct SiftedBlock {
    pub client_bits: BitString,
    pub hub_bits: BitString,
    pub slot_map: Vec<u64>,
    pub decoy_levels: Vec<DecoyLevel>,
    pub session_id: String,
}

impl SiftedBlock {
    pub fn empty(session_id: impl Into<String>) -> SiftedBlock {
        SiftedBlock {
            client_bits: BitString::new(),
            hub_bits: BitString::new(),
            slot_map: Vec::new(),
            decoy_levels: Vec::new(),
            session_id: session_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.client_bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Columns stay aligned only if every field has the same length.
    pub fn check_aligned(&self) -> bool {
        let n = self.client_bits.len();
        self.hub_bits.len() == n && self.slot_map.len() == n && self.decoy_levels.len() == n
    }

    /// Splits the block into (selected, remaining) by sorted position
    /// indices. Used for QBER sampling and for separating decoy levels.
    pub fn take_indices(&self, sorted_idx: &[usize]) -> (SiftedBlock, SiftedBlock) {
        debug_assert!(sorted_idx.windows(2).all(|w| w[0] < w[1]));
        let taken = SiftedBlock {
            client_bits: self.client_bits.gather(sorted_idx),
            hub_bits: self.hub_bits.gather(sorted_idx),
            slot_map: sorted_idx.iter().map(|&i| self.slot_map[i]).collect(),
            decoy_levels: sorted_idx.iter().map(|&i| self.decoy_levels[i]).collect(),
            session_id: self.session_id.clone(),
        };
        let mut keep = Vec::with_capacity(self.len() - sorted_idx.len());
        let mut cursor = 0;
        for i in 0..self.len() {
            if cursor < sorted_idx.len() && sorted_idx[cursor] == i {
                cursor += 1;
            } else {
                keep.push(i);
            }
        }
        let remaining = SiftedBlock {
            client_bits: self.client_bits.gather(&keep),
            hub_bits: self.hub_bits.gather(&keep),
            slot_map: keep.iter().map(|&i| self.slot_map[i]).collect(),
            decoy_levels: keep.iter().map(|&i| self.decoy_levels[i]).collect(),
            session_id: self.session_id.clone(),
        };
        (taken, remaining)
    }

    /// Positions carrying the given decoy level.
    pub fn level_positions(&self, level: DecoyLevel) -> Vec<usize> {
        self.decoy_levels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| (*l == level).then_some(i))
            .collect()
    }

    /// Number of client/hub bit disagreements.
    pub fn error_count(&self) -> usize {
        self.client_bits.distance(&self.hub_bits)
    }
}

/// Where a block of secret bits came from. Key-splitting shares are
/// marked so they are never mistaken for fresh QKD output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Qkd,
    SplitShare,
}

/// Distilled secret key material for one session epoch. The length is a
/// multiple of 256 so the key manager can parse it into triples without a
/// ragged tail.
#[derive(Clone, Debug, PartialEq)]
pub struct SecretKeyBlock {
    pub bits: BitString,
    pub session_id: String,
    pub epoch: u64,
    pub provenance: Provenance,
}

impl SecretKeyBlock {
    pub fn new(
        bits: BitString,
        session_id: impl Into<String>,
        epoch: u64,
        provenance: Provenance,
    ) -> Result<SecretKeyBlock, PostprocError> {
        if bits.len() % 256 != 0 {
            return Err(PostprocError::KeyBlockAlignment(bits.len()));
        }
        Ok(SecretKeyBlock { bits, session_id: session_id.into(), epoch, provenance })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Running tally of classical-channel disclosure for one session. The
/// final key length subtracts `total()`; a property test asserts the tally
/// equals the actual transcript.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LeakageLedger {
    /// Bits disclosed for QBER estimation.
    pub sampled_bits: u64,
    /// Syndrome bits sent during reconciliation.
    pub syndrome_bits: u64,
    /// Verification hash bits sent during reconciliation.
    pub hash_bits: u64,
    /// Bits disclosed outright (short reconciliation tails, fallback
    /// disclosure of an undecodable block).
    pub disclosed_bits: u64,
}

impl LeakageLedger {
    pub fn total(&self) -> u64 {
        self.sampled_bits + self.syndrome_bits + self.hash_bits + self.disclosed_bits
    }
}

/// Binary entropy, total over all of `[0, 1]` (0 at both endpoints).
pub fn h2(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    -x * x.log2() - (1.0 - x) * (1.0 - x).log2()
}

/// Distillable key length for one epoch:
///
/// ```text
/// max(0, floor(n_sig * (Q1 / Qmu) * (1 - H2(e1)) - leaked - eps))
/// ```
///
/// `n_sig` is the sifted signal-level bit count, `q1_lower`/`q_mu` are the
/// single-photon and overall signal gains in the same (sifted) convention,
/// `e1_upper` bounds the single-photon error rate, `leaked_bits` is the
/// ledger total, and `eps_exponent` (conventionally 64) is a flat security
/// margin. Zero means no key this epoch, which is an outcome, not an
/// error.
pub fn final_key_length(
    n_sig: u64,
    q1_lower: f64,
    e1_upper: f64,
    q_mu: f64,
    leaked_bits: u64,
    eps_exponent: u64,
) -> u64 {
    if q_mu <= 0.0 || q1_lower <= 0.0 {
        return 0;
    }
    let ratio = (q1_lower / q_mu).min(1.0);
    let single_photon = n_sig as f64 * ratio * (1.0 - h2(e1_upper));
    let length = single_photon - leaked_bits as f64 - eps_exponent as f64;
    if length <= 0.0 {
        0
    } else {
        length.floor() as u64
    }
}
