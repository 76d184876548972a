//! Privacy amplification by Toeplitz hashing over GF(2).
//!
//! The seed of `key_len + out_len - 1` bits defines the matrix by
//! anti-diagonals: `T[i][j] = seed[out_len - 1 + j - i]`, so the first
//! column is `seed[0..out_len)` read bottom-to-top and the first row is
//! `seed[out_len - 1..]`. Row `i` is then the seed window starting at
//! `out_len - 1 - i`, which lets each output bit be computed as one
//! windowed dot product over packed words.

use super::PostprocError;
use crate::bits::BitString;

/// Compresses `key` to `out_len` bits with the Toeplitz matrix defined by
/// `seed`. Deterministic in `(key, seed)`; the seed may be public after
/// use (it is chosen independently of the key).
pub fn privacy_amplify(
    key: &BitString,
    out_len: usize,
    seed: &BitString,
) -> Result<BitString, PostprocError> {
    if out_len > key.len() {
        return Err(PostprocError::OutLenRange { out_len, key_len: key.len() });
    }
    let expected = (key.len() + out_len).saturating_sub(1);
    if seed.len() != expected {
        return Err(PostprocError::SeedLength { expected, got: seed.len() });
    }
    let mut out = BitString::with_capacity(out_len);
    for i in 0..out_len {
        out.push(seed.window_dot(out_len - 1 - i, key));
    }
    Ok(out)
}
