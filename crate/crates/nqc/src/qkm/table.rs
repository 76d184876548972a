//! Published pair-key lookup tables on disk.
//!
//! Layout (big-endian): magic "NQCP", u16 version, u32 record count, then
//! per record from_id (u32), to_id (u32), epoch (u64), P (32 bytes),
//! A (32 bytes); a SHA-256 digest of everything before it closes the
//! file. Import checks framing, the digest, and that epochs are strictly
//! increasing per directed pair.

use super::{ClientId, KeyStore, PairKeyRecord, QkmError};
use crate::primitives::{sha256, Key256};
use std::collections::HashMap;
use std::path::Path;

const MAGIC: [u8; 4] = *b"NQCP";
const VERSION: u16 = 1;
const RECORD_LEN: usize = 4 + 4 + 8 + 32 + 32;

/// Serializes records to `path` in publication order.
pub fn write_table(path: &Path, records: &[PairKeyRecord]) -> Result<(), QkmError> {
    let mut body = Vec::with_capacity(10 + records.len() * RECORD_LEN + 32);
    body.extend_from_slice(&MAGIC);
    body.extend_from_slice(&VERSION.to_be_bytes());
    body.extend_from_slice(&(records.len() as u32).to_be_bytes());
    for rec in records {
        body.extend_from_slice(&rec.from_id.to_be_bytes());
        body.extend_from_slice(&rec.to_id.to_be_bytes());
        body.extend_from_slice(&rec.epoch.to_be_bytes());
        body.extend_from_slice(rec.p.as_bytes());
        body.extend_from_slice(rec.a.as_bytes());
    }
    let digest = sha256(&body);
    body.extend_from_slice(&digest);
    std::fs::write(path, body)?;
    Ok(())
}

/// Publishes one pair key per directed pair and writes the table.
/// All-or-nothing: availability for every pair is checked before any
/// component is consumed.
pub fn export_lookup_table(
    store: &mut KeyStore,
    pairs: &[(ClientId, ClientId)],
    path: &Path,
) -> Result<Vec<PairKeyRecord>, QkmError> {
    // Dry-run the epoch selection on a scratch copy first.
    let mut probe = store.clone();
    for &(from, to) in pairs {
        probe.publish_pair_key(from, to)?;
    }
    let mut records = Vec::with_capacity(pairs.len());
    for &(from, to) in pairs {
        records.push(store.publish_pair_key(from, to)?);
    }
    write_table(path, &records)?;
    Ok(records)
}

/// Reads and validates a table file.
pub fn read_table(path: &Path) -> Result<Vec<PairKeyRecord>, QkmError> {
    let data = std::fs::read(path)?;
    let mut off = Reader { data: &data, pos: 0 };
    let magic: [u8; 4] = off.take(4, "magic")?.try_into().expect("length checked");
    if magic != MAGIC {
        return Err(QkmError::BadMagic { got: magic, expected: MAGIC });
    }
    let version = u16::from_be_bytes(off.take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(QkmError::Version(version));
    }
    let count = u32::from_be_bytes(off.take(4, "record count")?.try_into().unwrap()) as usize;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    let mut last_epoch: HashMap<(u32, u32), u64> = HashMap::new();
    for index in 0..count {
        let from_id = u32::from_be_bytes(off.take(4, "record from_id")?.try_into().unwrap());
        let to_id = u32::from_be_bytes(off.take(4, "record to_id")?.try_into().unwrap());
        let epoch = u64::from_be_bytes(off.take(8, "record epoch")?.try_into().unwrap());
        let p: [u8; 32] = off.take(32, "record P")?.try_into().unwrap();
        let a: [u8; 32] = off.take(32, "record A")?.try_into().unwrap();
        if let Some(&previous) = last_epoch.get(&(from_id, to_id)) {
            if epoch <= previous {
                return Err(QkmError::TableEpochOrder { index, from_id, to_id, epoch, previous });
            }
        }
        last_epoch.insert((from_id, to_id), epoch);
        records.push(PairKeyRecord {
            from_id,
            to_id,
            epoch,
            p: Key256::from_bytes(p),
            a: Key256::from_bytes(a),
        });
    }
    let body_len = off.pos;
    let digest: [u8; 32] = off.take(32, "integrity digest")?.try_into().unwrap();
    if off.pos != data.len() {
        return Err(QkmError::StoreDecode { offset: off.pos as u64, what: "trailing bytes" });
    }
    if sha256(&data[..body_len]) != digest {
        return Err(QkmError::TableIntegrity);
    }
    Ok(records)
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
