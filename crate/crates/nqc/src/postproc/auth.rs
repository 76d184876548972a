//! One-time transcript authentication: an ε-almost-universal polynomial
//! division hash over GF(2^64), masked with a one-time pad.
//!
//! The first half of the key material selects a degree-64 irreducible
//! polynomial (deterministically: the 64 bits seed a candidate, bumped to
//! the next irreducible); the second half is the pad. Tags are 64 bits.
//! The hash processes a 64-bit length prefix then the message, then
//! multiplies by x^64, so messages of different lengths never alias and
//! any single-bit flip changes the tag with certainty (x^(i+64) mod p is
//! never zero for irreducible p).

use super::PostprocError;
use crate::bits::BitString;
use crate::primitives::Key256;

/// Derived authentication key: an irreducible modulus and a pad.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct AuthKey {
    poly: u64,
    otp: u64,
}

impl std::fmt::Debug for AuthKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "AuthKey(..)")
    }
}

impl AuthKey {
    /// Consumes the first 128 bits: 64 for the hash polynomial seed, 64
    /// for the one-time pad.
    pub fn from_bits(bits: &BitString) -> Result<AuthKey, PostprocError> {
        if bits.len() < 128 {
            return Err(PostprocError::AuthKeyLength(bits.len()));
        }
        let bytes = bits.to_bytes();
        let seed = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let otp = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        Ok(AuthKey { poly: next_irreducible(seed), otp })
    }

    /// Same derivation from the first 16 bytes of a 256-bit key.
    pub fn from_key(key: &Key256) -> AuthKey {
        let bytes = key.as_bytes();
        let seed = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let otp = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        AuthKey { poly: next_irreducible(seed), otp }
    }

    #[cfg(test)]
    fn with_otp(mut self, otp: u64) -> AuthKey {
        self.otp = otp;
        self
    }
}

/// Tags `message` under a fresh one-time key.
pub fn authenticate(message: &[u8], key: &AuthKey) -> [u8; 8] {
    (division_hash(message, key.poly) ^ key.otp).to_be_bytes()
}

/// Recomputes and compares in constant time. A mismatch means the epoch
/// must be aborted by the caller.
pub fn verify_tag(message: &[u8], tag: &[u8; 8], key: &AuthKey) -> bool {
    let expect = division_hash(message, key.poly) ^ key.otp;
    let diff = expect ^ u64::from_be_bytes(*tag);
    // Collapses to 0 or 1 without a data-dependent branch.
    ((diff | diff.wrapping_neg()) >> 63) == 0
}

/// state := state * x + bit  (mod x^64 + p_low)
#[inline]
fn shift_in(state: u64, bit: u64, p_low: u64) -> u64 {
    let carry = state >> 63;
    let shifted = (state << 1) | bit;
    shifted ^ (p_low * carry)
}

/// Hash of (len_be64 || message) * x^64 mod p.
fn division_hash(message: &[u8], p_low: u64) -> u64 {
    let mut state = 0u64;
    let absorb = |byte: u8, state: &mut u64| {
        for k in (0..8).rev() {
            *state = shift_in(*state, ((byte >> k) & 1) as u64, p_low);
        }
    };
    for byte in (message.len() as u64).to_be_bytes() {
        absorb(byte, &mut state);
    }
    for &byte in message {
        absorb(byte, &mut state);
    }
    for _ in 0..64 {
        state = shift_in(state, 0, p_low);
    }
    state
}

/// Carryless (GF(2)) product of two 64-bit polynomials.
fn clmul(a: u64, b: u64) -> u128 {
    let mut acc = 0u128;
    let wide = b as u128;
    let mut rest = a;
    while rest != 0 {
        let i = rest.trailing_zeros();
        acc ^= wide << i;
        rest &= rest - 1;
    }
    acc
}

/// Reduces a product of two degree-<64 polynomials modulo x^64 + p_low.
fn reduce128(mut v: u128, p_low: u64) -> u64 {
    let p_full = (1u128 << 64) | p_low as u128;
    for i in (64..128).rev() {
        if (v >> i) & 1 == 1 {
            v ^= p_full << (i - 64);
        }
    }
    v as u64
}

fn mulmod(a: u64, b: u64, p_low: u64) -> u64 {
    reduce128(clmul(a, b), p_low)
}

fn poly_deg(v: u128) -> i32 {
    127 - v.leading_zeros() as i32
}

/// Remainder of a divided by b over GF(2), b nonzero.
fn poly_rem(mut a: u128, b: u128) -> u128 {
    let db = poly_deg(b);
    while a != 0 {
        let da = poly_deg(a);
        if da < db {
            break;
        }
        a ^= b << (da - db);
    }
    a
}

fn poly_gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        let r = poly_rem(a, b);
        a = b;
        b = r;
    }
    a
}

/// Degree-64 irreducibility: x^(2^64) = x (mod p) and, for the single
/// prime factor 2 of 64, gcd(x^(2^32) - x, p) = 1.
fn is_irreducible(p_low: u64) -> bool {
    // Repeated squaring of x modulo p.
    let mut t = 2u64; // the polynomial x
    for _ in 0..32 {
        t = mulmod(t, t, p_low);
    }
    let t32 = t;
    for _ in 0..32 {
        t = mulmod(t, t, p_low);
    }
    if t != 2 {
        return false;
    }
    let p_full = (1u128 << 64) | p_low as u128;
    poly_gcd((t32 ^ 2) as u128, p_full) == 1
}

/// First irreducible at or after the seeded candidate (constant term
/// forced to 1, stepping by 2 keeps it there).
fn next_irreducible(seed: u64) -> u64 {
    let mut candidate = seed | 1;
    loop {
        if is_irreducible(candidate) {
            return candidate;
        }
        candidate = candidate.wrapping_add(2);
    }
}
