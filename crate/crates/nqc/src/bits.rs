//! Packed bit strings.
//!
//! Bit `i` lives in word `i / 64` at position `i % 64` (LSB-first). Byte
//! serialization follows the same order: bit `i` maps to byte `i / 8`, bit
//! `i % 8`. Every routine that hands bits to a hash or a wire format goes
//! through [`BitString::to_bytes`], so the layout is normative for the
//! whole crate.

use std::fmt;

#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct BitString {
    words: Vec<u64>,
    len: usize,
}

impl BitString {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(bits: usize) -> Self {
        Self {
            words: Vec::with_capacity(bits.div_ceil(64)),
            len: 0,
        }
    }

    /// All-zero string of `len` bits.
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut s = Self::with_capacity(bits.len());
        for &b in bits {
            s.push(b);
        }
        s
    }

    /// Reconstructs from [`Self::to_bytes`] output; `len` trims padding bits.
    pub fn from_bytes(bytes: &[u8], len: usize) -> Self {
        assert!(len <= bytes.len() * 8, "length exceeds byte payload");
        let mut words = vec![0u64; len.div_ceil(64)];
        for (i, &b) in bytes.iter().enumerate() {
            if i * 8 >= len {
                break;
            }
            words[i / 8] |= (b as u64) << ((i % 8) * 8);
        }
        let mut s = Self { words, len };
        s.mask_tail();
        s
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: bool) {
        debug_assert!(i < self.len);
        let w = &mut self.words[i / 64];
        if v {
            *w |= 1 << (i % 64);
        } else {
            *w &= !(1 << (i % 64));
        }
    }

    #[inline]
    pub fn push(&mut self, v: bool) {
        if self.len % 64 == 0 {
            self.words.push(0);
        }
        if v {
            self.words[self.len / 64] |= 1 << (self.len % 64);
        }
        self.len += 1;
    }

    pub fn extend_from(&mut self, other: &BitString) {
        for i in 0..other.len {
            self.push(other.get(i));
        }
    }

    /// XOR of two equal-length strings.
    pub fn xor_assign(&mut self, other: &BitString) {
        assert_eq!(self.len, other.len, "xor of unequal lengths");
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a ^= b;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Hamming distance to an equal-length string.
    pub fn distance(&self, other: &BitString) -> usize {
        assert_eq!(self.len, other.len, "distance of unequal lengths");
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }

    /// Parity of AND between `other` and the window of `self` starting at
    /// bit `offset` with `other.len()` bits. The window must fit.
    ///
    /// This is the Toeplitz row product: row i of the matrix is a window of
    /// the seed, so one call computes one output bit without materializing
    /// the matrix.
    pub fn window_dot(&self, offset: usize, other: &BitString) -> bool {
        assert!(
            offset + other.len <= self.len,
            "window [{offset}, {}) out of range {}",
            offset + other.len,
            self.len
        );
        let mut acc = 0u64;
        let shift = offset % 64;
        let base = offset / 64;
        for (k, &ow) in other.words.iter().enumerate() {
            let lo = self.words[base + k] >> shift;
            let hi = if shift == 0 {
                0
            } else {
                self.words
                    .get(base + k + 1)
                    .map_or(0, |w| w << (64 - shift))
            };
            let mut sw = lo | hi;
            // Mask the final partial word of `other`.
            if (k + 1) * 64 > other.len {
                let valid = other.len - k * 64;
                if valid < 64 {
                    sw &= (1u64 << valid) - 1;
                }
            }
            acc ^= sw & ow;
        }
        acc.count_ones() % 2 == 1
    }

    /// Contiguous sub-string of `len` bits starting at `start`.
    pub fn slice(&self, start: usize, len: usize) -> BitString {
        assert!(start + len <= self.len);
        let mut out = BitString::with_capacity(len);
        for i in 0..len {
            out.push(self.get(start + i));
        }
        out
    }

    /// Bits at `indices`, in the given order.
    pub fn gather(&self, indices: &[usize]) -> BitString {
        let mut out = Self::with_capacity(indices.len());
        for &i in indices {
            out.push(self.get(i));
        }
        out
    }

    /// Remaining bits after removing `sorted_indices` (must be strictly
    /// increasing).
    pub fn remove_sorted(&self, sorted_indices: &[usize]) -> BitString {
        let mut out = Self::with_capacity(self.len - sorted_indices.len());
        let mut it = sorted_indices.iter().peekable();
        for i in 0..self.len {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                out.push(self.get(i));
            }
        }
        out
    }

    /// Serializes with zero padding in the final byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len.div_ceil(8)];
        for (i, b) in out.iter_mut().enumerate() {
            *b = (self.words[i / 8] >> ((i % 8) * 8)) as u8;
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    fn mask_tail(&mut self) {
        if self.len % 64 != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << (self.len % 64)) - 1;
            }
        }
    }
}

impl fmt::Debug for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitString[{}; ", self.len)?;
        for i in 0..self.len.min(64) {
            write!(f, "{}", self.get(i) as u8)?;
        }
        if self.len > 64 {
            write!(f, "…")?;
        }
        write!(f, "]")
    }
}

/// Fills `n` uniform bits from `rng`.
pub fn random_bits<R: rand::Rng>(rng: &mut R, n: usize) -> BitString {
    let mut s = BitString {
        words: (0..n.div_ceil(64)).map(|_| rng.next_u64()).collect(),
        len: n,
    };
    s.mask_tail();
    s
}
