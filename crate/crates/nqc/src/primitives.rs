//! Shared cryptographic plumbing: 256-bit key material, the named-primitive
//! registry (hash, cipher, MAC), constant-time comparison, and the two CRCs
//! used by wire formats and reconciliation verification.

use aes::Aes256;
use ctr::Ctr128BE;
use ctr::cipher::{KeyIvInit, StreamCipher};
use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use thiserror::Error;

/// 256 bits of key material.
#[derive(Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Key256(pub [u8; 32]);

impl Key256 {
    pub const ZERO: Key256 = Key256([0; 32]);

    pub fn from_bytes(bytes: [u8; 32]) -> Key256 {
        Key256(bytes)
    }

    pub fn xor(&self, other: &Key256) -> Key256 {
        let mut out = [0u8; 32];
        for i in 0..32 {
            out[i] = self.0[i] ^ other.0[i];
        }
        Key256(out)
    }

    pub fn from_rng<R: rand::Rng>(rng: &mut R) -> Key256 {
        let mut out = [0u8; 32];
        rng.fill_bytes(&mut out);
        Key256(out)
    }

    /// Constant-time equality.
    pub fn ct_eq(&self, other: &Key256) -> bool {
        ct_eq(&self.0, &other.0)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for Key256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Key material never lands in logs.
        write!(f, "Key256(..)")
    }
}

/// Constant-time byte-slice equality. Unequal lengths return false without
/// inspecting contents.
pub fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut acc = 0u8;
    for (x, y) in a.iter().zip(b) {
        acc |= x ^ y;
    }
    acc == 0
}

pub fn sha256(data: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(data);
    h.finalize().into()
}

pub fn sha256_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

#[derive(Debug, Error)]
#[error("unknown {kind} primitive {name:?}")]
pub struct UnknownPrimitive {
    kind: &'static str,
    name: String,
}

/// Named hash primitives. The QKM and QDS layers call hashes through this
/// registry so deployments can swap the function without touching protocol
/// code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum HashAlg {
    #[default]
    #[serde(rename = "sha256")]
    Sha256,
}

impl HashAlg {
    pub fn from_name(name: &str) -> Result<Self, UnknownPrimitive> {
        match name {
            "sha256" => Ok(HashAlg::Sha256),
            _ => Err(UnknownPrimitive { kind: "hash", name: name.into() }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HashAlg::Sha256 => "sha256",
        }
    }

    pub fn digest_parts(&self, parts: &[&[u8]]) -> [u8; 32] {
        match self {
            HashAlg::Sha256 => sha256_parts(parts),
        }
    }
}

/// Named stream ciphers for the secured channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum CipherAlg {
    #[default]
    #[serde(rename = "aes256-ctr")]
    Aes256Ctr,
}

impl CipherAlg {
    pub fn from_name(name: &str) -> Result<Self, UnknownPrimitive> {
        match name {
            "aes256-ctr" => Ok(CipherAlg::Aes256Ctr),
            _ => Err(UnknownPrimitive { kind: "cipher", name: name.into() }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CipherAlg::Aes256Ctr => "aes256-ctr",
        }
    }

    /// In-place keystream XOR (encrypt == decrypt).
    pub fn apply(&self, key: &Key256, iv: &[u8; 16], buf: &mut [u8]) {
        match self {
            CipherAlg::Aes256Ctr => {
                let mut c = Ctr128BE::<Aes256>::new(key.as_bytes().into(), iv.into());
                c.apply_keystream(buf);
            }
        }
    }
}

/// Named MACs for the secured channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MacAlg {
    #[default]
    #[serde(rename = "hmac-sha256")]
    HmacSha256,
}

impl MacAlg {
    pub fn from_name(name: &str) -> Result<Self, UnknownPrimitive> {
        match name {
            "hmac-sha256" => Ok(MacAlg::HmacSha256),
            _ => Err(UnknownPrimitive { kind: "mac", name: name.into() }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MacAlg::HmacSha256 => "hmac-sha256",
        }
    }

    pub fn tag(&self, key: &Key256, parts: &[&[u8]]) -> [u8; 32] {
        match self {
            MacAlg::HmacSha256 => {
                let mut m = Hmac::<Sha256>::new_from_slice(key.as_bytes())
                    .expect("hmac accepts 32-byte keys");
                for p in parts {
                    m.update(p);
                }
                m.finalize().into_bytes().into()
            }
        }
    }
}

/// CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF, no reflection, no xorout),
/// the checksum convention of C37.118-style synchrophasor frames. Bitwise
/// form; the table-driven oracle lives in the PMU codec tests.
pub fn crc16_ccitt(data: &[u8]) -> u16 {
    let mut crc: u16 = 0xFFFF;
    for &byte in data {
        crc ^= (byte as u16) << 8;
        for _ in 0..8 {
            if crc & 0x8000 != 0 {
                crc = (crc << 1) ^ 0x1021;
            } else {
                crc <<= 1;
            }
        }
    }
    crc
}

/// CRC-64/ECMA-182 (poly 0x42F0E1EBA9EA3693, init 0, no reflection). Used as
/// the 64-bit reconciliation verification hash; it is an unkeyed integrity
/// check, and its 64 bits are charged to the leakage ledger.
pub fn crc64(data: &[u8]) -> u64 {
    const POLY: u64 = 0x42F0_E1EB_A9EA_3693;
    let mut crc: u64 = 0;
    for &byte in data {
        crc ^= (byte as u64) << 56;
        for _ in 0..8 {
            if crc & (1 << 63) != 0 {
                crc = (crc << 1) ^ POLY;
            } else {
                crc <<= 1;
            }
        }
    }
    crc
}
