//! Encrypted key-store files.
//!
//! Layout (big-endian): magic "NQCK", u16 version, 16-byte salt, 16-byte
//! IV, u64 ciphertext length, ciphertext, HMAC-SHA256 tag over everything
//! before it. Encryption and MAC keys are derived from the passphrase by
//! an iterated salted SHA-256 chain with distinct labels, and the file is
//! encrypt-then-MAC: the tag is checked before any decryption.

use super::{Component, ConsumptionEvent, KeyStore, KeyTriple, QkmError};
use crate::bits::BitString;
use crate::primitives::{ct_eq, sha256_parts, CipherAlg, HashAlg, Key256, MacAlg};
use rand::Rng;
use std::collections::BTreeSet;
use std::path::Path;

const MAGIC: [u8; 4] = *b"NQCK";
const VERSION: u16 = 1;
const KDF_ITERATIONS: u32 = 10_000;

fn derive_file_key(passphrase: &str, salt: &[u8; 16], label: &[u8]) -> Key256 {
    let mut digest = sha256_parts(&[b"nqck-kdf-v1", label, salt, passphrase.as_bytes()]);
    for _ in 1..KDF_ITERATIONS {
        digest = sha256_parts(&[&digest, passphrase.as_bytes()]);
    }
    Key256::from_bytes(digest)
}

impl KeyStore {
    /// Encrypts the full store state to `path`. Salt, IV, and the
    /// persisted entropy reseed are drawn from the store's own entropy
    /// stream, so a run that saves at a fixed point produces identical
    /// bytes on replay.
    pub fn save(&mut self, path: &Path, passphrase: &str) -> Result<(), QkmError> {
        let mut salt = [0u8; 16];
        self.entropy.fill_bytes(&mut salt);
        let mut iv = [0u8; 16];
        self.entropy.fill_bytes(&mut iv);
        let mut reseed = [0u8; 32];
        self.entropy.fill_bytes(&mut reseed);

        let mut body = self.encode_body(&reseed);
        let enc_key = derive_file_key(passphrase, &salt, b"enc");
        let mac_key = derive_file_key(passphrase, &salt, b"mac");
        CipherAlg::Aes256Ctr.apply(&enc_key, &iv, &mut body);

        let mut file = Vec::with_capacity(4 + 2 + 16 + 16 + 8 + body.len() + 32);
        file.extend_from_slice(&MAGIC);
        file.extend_from_slice(&VERSION.to_be_bytes());
        file.extend_from_slice(&salt);
        file.extend_from_slice(&iv);
        file.extend_from_slice(&(body.len() as u64).to_be_bytes());
        file.extend_from_slice(&body);
        let tag = MacAlg::HmacSha256.tag(&mac_key, &[&file]);
        file.extend_from_slice(&tag);
        std::fs::write(path, file)?;
        Ok(())
    }

    /// Loads a store saved by [`KeyStore::save`]. Authentication failure
    /// (wrong passphrase or any corruption) is a single opaque error.
    pub fn load(path: &Path, passphrase: &str) -> Result<KeyStore, QkmError> {
        let data = std::fs::read(path)?;
        let mut rd = Reader { data: &data, pos: 0 };
        let magic: [u8; 4] = rd.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(QkmError::BadMagic { got: magic, expected: MAGIC });
        }
        let version = u16::from_be_bytes(rd.take(2, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(QkmError::Version(version));
        }
        let salt: [u8; 16] = rd.take(16, "salt")?.try_into().unwrap();
        let iv: [u8; 16] = rd.take(16, "iv")?.try_into().unwrap();
        let ct_len = u64::from_be_bytes(rd.take(8, "ciphertext length")?.try_into().unwrap());
        let ct_start = rd.pos;
        let mut body = rd.take(ct_len as usize, "ciphertext")?.to_vec();
        let tag: [u8; 32] = rd.take(32, "authentication tag")?.try_into().unwrap();
        if rd.pos != data.len() {
            return Err(QkmError::StoreDecode { offset: rd.pos as u64, what: "trailing bytes" });
        }
        let mac_key = derive_file_key(passphrase, &salt, b"mac");
        let expect = MacAlg::HmacSha256.tag(&mac_key, &[&data[..ct_start + ct_len as usize]]);
        if !ct_eq(&expect, &tag) {
            return Err(QkmError::StoreAuth);
        }
        let enc_key = derive_file_key(passphrase, &salt, b"enc");
        CipherAlg::Aes256Ctr.apply(&enc_key, &iv, &mut body);
        KeyStore::decode_body(&body)
    }

    fn encode_body(&self, reseed: &[u8; 32]) -> Vec<u8> {
        let mut out = Vec::new();
        let hash_name = self.hash.name().as_bytes();
        out.push(hash_name.len() as u8);
        out.extend_from_slice(hash_name);

        let clients: BTreeSet<u32> = self
            .next_epoch
            .keys()
            .chain(self.residual.keys())
            .copied()
            .collect();
        out.extend_from_slice(&(clients.len() as u32).to_be_bytes());
        for &client in &clients {
            out.extend_from_slice(&client.to_be_bytes());
            out.extend_from_slice(&self.next_epoch.get(&client).copied().unwrap_or(0).to_be_bytes());
            let residual = self.residual.get(&client).cloned().unwrap_or_default();
            out.extend_from_slice(&(residual.len() as u32).to_be_bytes());
            out.extend_from_slice(&residual.to_bytes());
        }

        out.extend_from_slice(&(self.triples.len() as u32).to_be_bytes());
        for t in self.triples.values() {
            out.extend_from_slice(&t.client_id.to_be_bytes());
            out.extend_from_slice(&t.epoch.to_be_bytes());
            out.extend_from_slice(t.k.as_bytes());
            out.extend_from_slice(t.l.as_bytes());
            out.extend_from_slice(t.m.as_bytes());
            let flags = t.consumed[0] as u8 | (t.consumed[1] as u8) << 1 | (t.consumed[2] as u8) << 2;
            out.push(flags);
        }

        out.extend_from_slice(&(self.audit.len() as u32).to_be_bytes());
        for ev in &self.audit {
            out.extend_from_slice(&ev.client_id.to_be_bytes());
            out.extend_from_slice(&ev.epoch.to_be_bytes());
            out.push(ev.component.index() as u8);
            let purpose = ev.purpose.as_bytes();
            out.extend_from_slice(&(purpose.len() as u16).to_be_bytes());
            out.extend_from_slice(purpose);
        }

        out.extend_from_slice(&self.next_group.to_be_bytes());
        out.extend_from_slice(reseed);
        out
    }

    fn decode_body(body: &[u8]) -> Result<KeyStore, QkmError> {
        let mut rd = Reader { data: body, pos: 0 };
        let name_len = rd.take(1, "hash name length")?[0] as usize;
        let name = std::str::from_utf8(rd.take(name_len, "hash name")?)
            .map_err(|_| QkmError::StoreDecode { offset: rd.pos as u64, what: "hash name utf-8" })?;
        let hash = HashAlg::from_name(name)
            .map_err(|_| QkmError::StoreDecode { offset: rd.pos as u64, what: "hash name" })?;

        let mut store = KeyStore::new(&[0u8; 32]).with_hash(hash);
        let client_count = u32::from_be_bytes(rd.take(4, "client count")?.try_into().unwrap());
        for _ in 0..client_count {
            let client = u32::from_be_bytes(rd.take(4, "client id")?.try_into().unwrap());
            let next = u64::from_be_bytes(rd.take(8, "next epoch")?.try_into().unwrap());
            let bit_len = u32::from_be_bytes(rd.take(4, "residual length")?.try_into().unwrap()) as usize;
            let bytes = rd.take(bit_len.div_ceil(8), "residual bits")?;
            store.next_epoch.insert(client, next);
            store.residual.insert(client, BitString::from_bytes(bytes, bit_len));
        }

        let triple_count = u32::from_be_bytes(rd.take(4, "triple count")?.try_into().unwrap());
        for _ in 0..triple_count {
            let client_id = u32::from_be_bytes(rd.take(4, "triple client")?.try_into().unwrap());
            let epoch = u64::from_be_bytes(rd.take(8, "triple epoch")?.try_into().unwrap());
            let k: [u8; 32] = rd.take(32, "triple K")?.try_into().unwrap();
            let l: [u8; 32] = rd.take(32, "triple L")?.try_into().unwrap();
            let m: [u8; 32] = rd.take(32, "triple M")?.try_into().unwrap();
            let flags = rd.take(1, "triple flags")?[0];
            if flags > 0b111 {
                return Err(QkmError::StoreDecode { offset: rd.pos as u64, what: "triple flags" });
            }
            store.triples.insert(
                (client_id, epoch),
                KeyTriple {
                    client_id,
                    epoch,
                    k: Key256::from_bytes(k),
                    l: Key256::from_bytes(l),
                    m: Key256::from_bytes(m),
                    consumed: [flags & 1 != 0, flags & 2 != 0, flags & 4 != 0],
                },
            );
        }

        let audit_count = u32::from_be_bytes(rd.take(4, "audit count")?.try_into().unwrap());
        for _ in 0..audit_count {
            let client_id = u32::from_be_bytes(rd.take(4, "event client")?.try_into().unwrap());
            let epoch = u64::from_be_bytes(rd.take(8, "event epoch")?.try_into().unwrap());
            let component = Component::from_index(rd.take(1, "event component")?[0])
                .ok_or(QkmError::StoreDecode { offset: rd.pos as u64, what: "event component" })?;
            let p_len = u16::from_be_bytes(rd.take(2, "purpose length")?.try_into().unwrap());
            let purpose = std::str::from_utf8(rd.take(p_len as usize, "purpose")?)
                .map_err(|_| QkmError::StoreDecode { offset: rd.pos as u64, what: "purpose utf-8" })?
                .to_owned();
            store.audit.push(ConsumptionEvent { client_id, epoch, component, purpose });
        }

        store.next_group = u32::from_be_bytes(rd.take(4, "group counter")?.try_into().unwrap());
        let reseed: [u8; 32] = rd.take(32, "entropy reseed")?.try_into().unwrap();
        if rd.pos != body.len() {
            return Err(QkmError::StoreDecode { offset: rd.pos as u64, what: "trailing bytes" });
        }
        store.entropy = crate::rng::stream(&reseed, &[b"keystore-entropy"]);
        Ok(store)
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], QkmError> {
        if self.pos + n > self.data.len() {
            return Err(QkmError::Truncated { offset: self.pos as u64, what });
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}
