//! Quantum digital signatures: Winternitz one-time signatures whose
//! signing keys expand deterministically from fresh QKD material, so the
//! hub can compute a client's verification key without any extra
//! transmission and forward it to peers under a transcript tag.
//!
//! A signing key is one hash chain per w-bit digest chunk plus checksum
//! chains; the signature releases intermediate chain values, and the
//! verifier completes each chain and compares against the compressed
//! root. Keys are strictly one-time.

use crate::bits::BitString;
use crate::postproc::{authenticate, verify_tag, AuthKey};
use crate::primitives::{ct_eq, HashAlg, Key256};
use crate::qkm::{ClientId, Component, KeyStore, QkmError};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QdsError {
    #[error("unsupported chunk width {0} (supported: 1, 2, 4, 8)")]
    UnsupportedWidth(u32),
    #[error("signing material too short: need at least {needed} bits, got {got}")]
    InsufficientMaterial { needed: usize, got: usize },
    #[error("signing key {key_id:#018x} already used; one-time keys never sign twice")]
    OneTimeViolation { key_id: u64 },
    #[error("signature has {got} elements, expected {expected}")]
    ElementCount { expected: usize, got: usize },
    #[error("signature and verification key disagree on parameters")]
    ParamsMismatch,
    #[error("signature and verification key disagree on key id")]
    KeyIdMismatch,
    #[error("recompressed chain ends do not match the verification root")]
    RootMismatch,
    #[error("verification message transcript tag failed")]
    AuthTag,
    #[error("stale verification key id {got:#018x}: already saw {latest:#018x} from this signer")]
    StaleKeyId { got: u64, latest: u64 },
    #[error("file truncated at byte offset {offset} while reading {what}")]
    Truncated { offset: u64, what: &'static str },
    #[error("bad magic {got:?}, expected {expected:?}")]
    BadMagic { got: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error(transparent)]
    Qkm(#[from] QkmError),
}

/// Winternitz parameters. `w_bits` is the digest chunk width; each chunk
/// gets a hash chain of length `2^w_bits`, and the checksum chains cover
/// the sum that prevents chunk-increment forgeries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WotsParams {
    pub w_bits: u32,
    pub n_msg_chains: usize,
    pub n_checksum_chains: usize,
    pub chain_len: usize,
    pub hash: HashAlg,
}

pub const DIGEST_BITS: usize = 256;

impl WotsParams {
    pub fn new(w_bits: u32) -> Result<WotsParams, QdsError> {
        if !matches!(w_bits, 1 | 2 | 4 | 8) {
            return Err(QdsError::UnsupportedWidth(w_bits));
        }
        let chain_len = 1usize << w_bits;
        let n_msg_chains = DIGEST_BITS / w_bits as usize;
        let max_checksum = n_msg_chains * (chain_len - 1);
        let checksum_bits = usize::BITS - max_checksum.leading_zeros(); // ceil(log2(max+1))
        let n_checksum_chains = checksum_bits.div_ceil(w_bits) as usize;
        Ok(WotsParams {
            w_bits,
            n_msg_chains,
            n_checksum_chains,
            chain_len,
            hash: HashAlg::Sha256,
        })
    }

    pub fn total_chains(&self) -> usize {
        self.n_msg_chains + self.n_checksum_chains
    }
}

impl Default for WotsParams {
    /// 4-bit chunks: 16-step chains, 64 message chains, 3 checksum
    /// chains, 67 total.
    fn default() -> WotsParams {
        WotsParams::new(4).expect("4 is a supported width")
    }
}

/// Packs a (client, epoch) pair into the u64 key identifier carried by
/// signatures and verification keys.
pub fn bind_key_id(client_id: ClientId, epoch: u32) -> u64 {
    (client_id as u64) << 32 | epoch as u64
}

#[derive(Clone)]
pub struct SigningKey {
    chain_seeds: Vec<Key256>,
    pub key_id: u64,
    pub params: WotsParams,
    used: bool,
}

impl SigningKey {
    pub fn is_used(&self) -> bool {
        self.used
    }
}

impl std::fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SigningKey")
            .field("key_id", &self.key_id)
            .field("used", &self.used)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerificationKey {
    pub root: Key256,
    pub key_id: u64,
    pub params: WotsParams,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Signature {
    pub key_id: u64,
    pub params: WotsParams,
    pub elements: Vec<Key256>,
}

/// Expands QKD material into a signing key: chain seed i is
/// H(material ∥ i), so hub and client derive the same key from the
/// shared secret without transmitting it.
pub fn keygen_from_qkd(
    material: &BitString,
    key_id: u64,
    params: WotsParams,
) -> Result<SigningKey, QdsError> {
    if material.len() < 256 {
        return Err(QdsError::InsufficientMaterial { needed: 256, got: material.len() });
    }
    let bytes = material.to_bytes();
    let chain_seeds = (0..params.total_chains() as u32)
        .map(|i| Key256::from_bytes(params.hash.digest_parts(&[&bytes, &i.to_be_bytes()])))
        .collect();
    Ok(SigningKey { chain_seeds, key_id, params, used: false })
}

/// `steps` applications of the chain hash to `start`.
fn chain(hash: HashAlg, start: &Key256, steps: usize) -> Key256 {
    let mut value = *start;
    for _ in 0..steps {
        value = Key256::from_bytes(hash.digest_parts(&[value.as_bytes()]));
    }
    value
}

fn compress_root(hash: HashAlg, ends: &[Key256]) -> Key256 {
    let parts: Vec<&[u8]> = ends.iter().map(|k| k.as_bytes().as_slice()).collect();
    Key256::from_bytes(hash.digest_parts(&parts))
}

/// Walks every chain to its end and compresses the ends into the public
/// root. Pure in the seeds; call before the key signs anything.
pub fn compute_verification(s: &SigningKey) -> VerificationKey {
    let p = s.params;
    let ends: Vec<Key256> = s
        .chain_seeds
        .iter()
        .map(|seed| chain(p.hash, seed, p.chain_len - 1))
        .collect();
    VerificationKey { root: compress_root(p.hash, &ends), key_id: s.key_id, params: p }
}

/// Splits a digest into w-bit chunks, most significant bits of each byte
/// first, and appends the checksum chunks.
fn full_chunks(digest: &[u8; 32], params: &WotsParams) -> Vec<u8> {
    let w = params.w_bits;
    let mask = ((1u16 << w) - 1) as u8;
    let per_byte = 8 / w as usize;
    let mut chunks = Vec::with_capacity(params.total_chains());
    for &byte in digest {
        for k in (0..per_byte).rev() {
            chunks.push(byte >> (k as u32 * w) & mask);
        }
    }
    debug_assert_eq!(chunks.len(), params.n_msg_chains);
    let checksum: u32 = chunks
        .iter()
        .map(|&c| params.chain_len as u32 - 1 - c as u32)
        .sum();
    for k in (0..params.n_checksum_chains).rev() {
        chunks.push((checksum >> (k as u32 * w)) as u8 & mask);
    }
    chunks
}

/// Signs a message digest: element i is the chunk-value'th chain step
/// from seed i. Split out from [`sign`] so adversarial tests can drive
/// chosen digests.
pub(crate) fn sign_digest(digest: &[u8; 32], s: &mut SigningKey) -> Result<Signature, QdsError> {
    if s.used {
        return Err(QdsError::OneTimeViolation { key_id: s.key_id });
    }
    s.used = true;
    let chunks = full_chunks(digest, &s.params);
    let elements = chunks
        .iter()
        .zip(&s.chain_seeds)
        .map(|(&c, seed)| chain(s.params.hash, seed, c as usize))
        .collect();
    Ok(Signature { key_id: s.key_id, params: s.params, elements })
}

/// Verifies a signature over a digest by completing every chain and
/// recompressing. Split out from [`verify`] for adversarial tests.
pub(crate) fn verify_digest(
    digest: &[u8; 32],
    sig: &Signature,
    v: &VerificationKey,
) -> Result<(), QdsError> {
    if sig.params != v.params {
        return Err(QdsError::ParamsMismatch);
    }
    if sig.key_id != v.key_id {
        return Err(QdsError::KeyIdMismatch);
    }
    let p = v.params;
    let chunks = full_chunks(digest, &p);
    if sig.elements.len() != chunks.len() {
        return Err(QdsError::ElementCount { expected: chunks.len(), got: sig.elements.len() });
    }
    let ends: Vec<Key256> = chunks
        .iter()
        .zip(&sig.elements)
        .map(|(&c, el)| chain(p.hash, el, p.chain_len - 1 - c as usize))
        .collect();
    let root = compress_root(p.hash, &ends);
    if ct_eq(root.as_bytes(), v.root.as_bytes()) {
        Ok(())
    } else {
        Err(QdsError::RootMismatch)
    }
}

/// Signs a message (its digest, Winternitz-style), irreversibly marking
/// the key used. A second call is a hard error.
pub fn sign(message: &[u8], s: &mut SigningKey) -> Result<Signature, QdsError> {
    let digest = s.params.hash.digest_parts(&[message]);
    sign_digest(&digest, s)
}

/// Accepts iff the completed chains recompress to the verification root.
pub fn verify(message: &[u8], sig: &Signature, v: &VerificationKey) -> Result<(), QdsError> {
    let digest = v.params.hash.digest_parts(&[message]);
    verify_digest(&digest, sig, v)
}

const SIG_MAGIC: [u8; 4] = *b"NQCS";
const SIG_VERSION: u16 = 1;

/// Serializes a signature: magic, version, key id, parameter header,
/// then the elements as contiguous 32-byte values.
pub fn encode_signature(sig: &Signature) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 2 + 8 + 5 + sig.elements.len() * 32);
    out.extend_from_slice(&SIG_MAGIC);
    out.extend_from_slice(&SIG_VERSION.to_be_bytes());
    out.extend_from_slice(&sig.key_id.to_be_bytes());
    out.push(sig.params.w_bits as u8);
    out.extend_from_slice(&(sig.params.n_msg_chains as u16).to_be_bytes());
    out.extend_from_slice(&(sig.params.n_checksum_chains as u16).to_be_bytes());
    for el in &sig.elements {
        out.extend_from_slice(el.as_bytes());
    }
    out
}

pub fn decode_signature(data: &[u8]) -> Result<Signature, QdsError> {
    let mut rd = Reader { data, pos: 0 };
    let magic: [u8; 4] = rd.take(4, "magic")?.try_into().unwrap();
    if magic != SIG_MAGIC {
        return Err(QdsError::BadMagic { got: magic, expected: SIG_MAGIC });
    }
    let version = u16::from_be_bytes(rd.take(2, "version")?.try_into().unwrap());
    if version != SIG_VERSION {
        return Err(QdsError::Version(version));
    }
    let key_id = u64::from_be_bytes(rd.take(8, "key id")?.try_into().unwrap());
    let w_bits = rd.take(1, "chunk width")?[0] as u32;
    let params = WotsParams::new(w_bits)?;
    let n_msg = u16::from_be_bytes(rd.take(2, "message chain count")?.try_into().unwrap());
    let n_cs = u16::from_be_bytes(rd.take(2, "checksum chain count")?.try_into().unwrap());
    if n_msg as usize != params.n_msg_chains || n_cs as usize != params.n_checksum_chains {
        return Err(QdsError::ElementCount {
            expected: params.total_chains(),
            got: n_msg as usize + n_cs as usize,
        });
    }
    let mut elements = Vec::with_capacity(params.total_chains());
    for _ in 0..params.total_chains() {
        let bytes: [u8; 32] = rd.take(32, "signature element")?.try_into().unwrap();
        elements.push(Key256::from_bytes(bytes));
    }
    if rd.pos != data.len() {
        return Err(QdsError::Truncated { offset: rd.pos as u64, what: "trailing bytes" });
    }
    Ok(Signature { key_id, params, elements })
}

/// A verification key in transit from the hub, tagged over its full
/// transcript with fresh verifier–hub material. `auth_epoch` names the
/// verifier triple whose K component keys the tag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerificationMessage {
    pub signer_id: ClientId,
    pub verifier_id: ClientId,
    pub auth_epoch: u64,
    pub key: VerificationKey,
    pub tag: [u8; 8],
}

impl VerificationMessage {
    fn transcript(&self) -> Vec<u8> {
        let mut body = Vec::with_capacity(4 + 4 + 8 + 8 + 1 + 32);
        body.extend_from_slice(&self.signer_id.to_be_bytes());
        body.extend_from_slice(&self.verifier_id.to_be_bytes());
        body.extend_from_slice(&self.auth_epoch.to_be_bytes());
        body.extend_from_slice(&self.key.key_id.to_be_bytes());
        body.push(self.key.params.w_bits as u8);
        body.extend_from_slice(self.key.root.as_bytes());
        body
    }
}

/// Hub side: wraps a signer's verification key for a verifier,
/// consuming one verifier K component to key the transcript tag.
pub fn distribute_verification(
    hub: &mut KeyStore,
    signer: ClientId,
    verifier: ClientId,
    key: &VerificationKey,
) -> Result<VerificationMessage, QdsError> {
    let purpose = format!("qds-verification {signer}->{verifier}");
    let k = hub.consume_component(verifier, Component::K, &purpose)?;
    let auth_epoch = hub.audit().last().expect("consumption just logged").epoch;
    let mut msg = VerificationMessage {
        signer_id: signer,
        verifier_id: verifier,
        auth_epoch,
        key: key.clone(),
        tag: [0; 8],
    };
    msg.tag = authenticate(&msg.transcript(), &AuthKey::from_key(&k));
    Ok(msg)
}

/// Tracks the newest accepted key id per signer so an old verification
/// key can never be replayed for a later signature.
#[derive(Clone, Debug, Default)]
pub struct VerifierRegistry {
    latest: BTreeMap<ClientId, u64>,
}

impl VerifierRegistry {
    pub fn new() -> VerifierRegistry {
        VerifierRegistry::default()
    }

    /// Snapshot of the newest accepted key id per signer, for
    /// persistence across processes.
    pub fn entries(&self) -> impl Iterator<Item = (ClientId, u64)> + '_ {
        self.latest.iter().map(|(&c, &k)| (c, k))
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (ClientId, u64)>) -> VerifierRegistry {
        VerifierRegistry { latest: entries.into_iter().collect() }
    }

    /// Verifier side: checks the transcript tag against the named local
    /// triple and key-id freshness, consuming the K component only on
    /// success.
    pub fn accept(
        &mut self,
        own: &mut KeyStore,
        msg: &VerificationMessage,
    ) -> Result<VerificationKey, QdsError> {
        let triple = own
            .triple(msg.verifier_id, msg.auth_epoch)
            .ok_or(QkmError::MissingTriple {
                client_id: msg.verifier_id,
                epoch: msg.auth_epoch,
            })?;
        if triple.is_consumed(Component::K) {
            return Err(QkmError::ComponentConsumed {
                client_id: msg.verifier_id,
                epoch: msg.auth_epoch,
                component: Component::K,
            }
            .into());
        }
        if !verify_tag(&msg.transcript(), &msg.tag, &AuthKey::from_key(&triple.k)) {
            return Err(QdsError::AuthTag);
        }
        if let Some(&latest) = self.latest.get(&msg.signer_id) {
            if msg.key.key_id <= latest {
                return Err(QdsError::StaleKeyId { got: msg.key.key_id, latest });
            }
        }
        // Tag checked and key id fresh: burn the component and record.
        let purpose = format!("qds-verification {}->{}", msg.signer_id, msg.verifier_id);
        let k = own.consume(msg.verifier_id, msg.auth_epoch, Component::K, &purpose)?;
        debug_assert!(verify_tag(&msg.transcript(), &msg.tag, &AuthKey::from_key(&k)));
        self.latest.insert(msg.signer_id, msg.key.key_id);
        Ok(msg.key.clone())
    }
}

const VMSG_MAGIC: [u8; 4] = *b"NQCV";
const VMSG_VERSION: u16 = 1;

/// Serializes a verification message: magic, version, the transcript
/// fields in transcript order, then the tag.
pub fn encode_verification_message(msg: &VerificationMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 2 + 4 + 4 + 8 + 8 + 1 + 32 + 8);
    out.extend_from_slice(&VMSG_MAGIC);
    out.extend_from_slice(&VMSG_VERSION.to_be_bytes());
    out.extend_from_slice(&msg.transcript());
    out.extend_from_slice(&msg.tag);
    out
}

pub fn decode_verification_message(data: &[u8]) -> Result<VerificationMessage, QdsError> {
    let mut rd = Reader { data, pos: 0 };
    let magic: [u8; 4] = rd.take(4, "magic")?.try_into().unwrap();
    if magic != VMSG_MAGIC {
        return Err(QdsError::BadMagic { got: magic, expected: VMSG_MAGIC });
    }
    let version = u16::from_be_bytes(rd.take(2, "version")?.try_into().unwrap());
    if version != VMSG_VERSION {
        return Err(QdsError::Version(version));
    }
    let signer_id = u32::from_be_bytes(rd.take(4, "signer id")?.try_into().unwrap());
    let verifier_id = u32::from_be_bytes(rd.take(4, "verifier id")?.try_into().unwrap());
    let auth_epoch = u64::from_be_bytes(rd.take(8, "auth epoch")?.try_into().unwrap());
    let key_id = u64::from_be_bytes(rd.take(8, "key id")?.try_into().unwrap());
    let w_bits = rd.take(1, "chunk width")?[0] as u32;
    let params = WotsParams::new(w_bits)?;
    let root: [u8; 32] = rd.take(32, "verification root")?.try_into().unwrap();
    let tag: [u8; 8] = rd.take(8, "transcript tag")?.try_into().unwrap();
    if rd.pos != data.len() {
        return Err(QdsError::Truncated { offset: rd.pos as u64, what: "trailing bytes" });
    }
    Ok(VerificationMessage {
        signer_id,
        verifier_id,
        auth_epoch,
        key: VerificationKey { root: Key256::from_bytes(root), key_id, params },
        tag,
    })
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], QdsError> {
        if self.pos + n > self.data.len() {
            return Err(QdsError::Truncated { offset: self.pos as u64, what });
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bits::random_bits;
    use crate::postproc::{Provenance, SecretKeyBlock};
    use crate::rng;
    use rand::RngExt;

    fn material(seed: u64) -> BitString {
        random_bits(&mut rng::from_u64(seed), 256)
    }

    #[test]
    fn test_params_w4_counts() {
        let p = WotsParams::default();
        assert_eq!(p.w_bits, 4);
        assert_eq!(p.chain_len, 16);
        assert_eq!(p.n_msg_chains, 64);
        assert_eq!(p.n_checksum_chains, 3);
        assert_eq!(p.total_chains(), 67);
    }

    #[test]
    fn test_params_other_widths() {
        let p1 = WotsParams::new(1).unwrap();
        assert_eq!((p1.n_msg_chains, p1.chain_len, p1.n_checksum_chains), (256, 2, 9));
        let p2 = WotsParams::new(2).unwrap();
        assert_eq!((p2.n_msg_chains, p2.chain_len, p2.n_checksum_chains), (128, 4, 5));
        let p8 = WotsParams::new(8).unwrap();
        assert_eq!((p8.n_msg_chains, p8.chain_len, p8.n_checksum_chains), (32, 256, 2));
        assert!(matches!(WotsParams::new(3), Err(QdsError::UnsupportedWidth(3))));
        assert!(matches!(WotsParams::new(16), Err(QdsError::UnsupportedWidth(16))));
    }

    #[test]
    fn test_keygen_deterministic() {
        let m = material(1);
        let a = keygen_from_qkd(&m, 7, WotsParams::default()).unwrap();
        let b = keygen_from_qkd(&m, 7, WotsParams::default()).unwrap();
        assert_eq!(a.chain_seeds, b.chain_seeds);
    }

    #[test]
    fn test_keygen_rejects_short_material() {
        let short = random_bits(&mut rng::from_u64(2), 255);
        assert!(matches!(
            keygen_from_qkd(&short, 0, WotsParams::default()),
            Err(QdsError::InsufficientMaterial { needed: 256, got: 255 })
        ));
    }

    #[test]
    fn test_keygen_avalanche() {
        // One flipped material bit changes every chain seed, across 100
        // random base materials.
        let mut rng = rng::from_u64(3);
        for _ in 0..100 {
            let base = random_bits(&mut rng, 256);
            let mut flipped = base.clone();
            let bit = rng.random_range(0..256);
            flipped.set(bit, !flipped.get(bit));
            let a = keygen_from_qkd(&base, 0, WotsParams::default()).unwrap();
            let b = keygen_from_qkd(&flipped, 0, WotsParams::default()).unwrap();
            for (sa, sb) in a.chain_seeds.iter().zip(&b.chain_seeds) {
                assert_ne!(sa, sb);
            }
        }
    }

    #[test]
    fn test_chunks_msb_first() {
        let mut digest = [0u8; 32];
        digest[0] = 0xAB;
        digest[1] = 0x05;
        let p = WotsParams::default();
        let chunks = full_chunks(&digest, &p);
        assert_eq!(&chunks[..4], &[0xA, 0xB, 0x0, 0x5]);
        assert_eq!(chunks.len(), 67);
    }

    #[test]
    fn test_checksum_zero_digest() {
        // All-zero digest: checksum = 64 * 15 = 960 = 0x3C0, encoded
        // MSB-first as chunks 3, 12, 0.
        let p = WotsParams::default();
        let chunks = full_chunks(&[0u8; 32], &p);
        assert_eq!(&chunks[64..], &[0x3, 0xC, 0x0]);
    }

    #[test]
    fn test_zero_chunk_releases_seed() {
        let mut s = keygen_from_qkd(&material(4), 0, WotsParams::default()).unwrap();
        let seed0 = s.chain_seeds[0];
        let mut digest = [0xFFu8; 32];
        digest[0] = 0x0F; // first chunk 0, second chunk 15
        let sig = sign_digest(&digest, &mut s).unwrap();
        assert_eq!(sig.elements[0], seed0);
    }

    #[test]
    fn test_sign_verify_roundtrip() {
        let mut rng = rng::from_u64(5);
        for trial in 0u64..10 {
            let mut s =
                keygen_from_qkd(&random_bits(&mut rng, 256), trial, WotsParams::default())
                    .unwrap();
            let v = compute_verification(&s);
            let msg = format!("measurement report {trial}");
            let sig = sign(msg.as_bytes(), &mut s).unwrap();
            assert!(verify(msg.as_bytes(), &sig, &v).is_ok());
        }
    }

    #[test]
    fn test_minimal_chain_w1() {
        let p = WotsParams::new(1).unwrap();
        let mut s = keygen_from_qkd(&material(6), 0, p).unwrap();
        let v = compute_verification(&s);
        // chain_len = 2: ends are single-step hashes of the seeds.
        let ends: Vec<Key256> = s
            .chain_seeds
            .iter()
            .map(|seed| chain(p.hash, seed, 1))
            .collect();
        assert_eq!(v.root, compress_root(p.hash, &ends));
        let sig = sign(b"single-step", &mut s).unwrap();
        assert!(verify(b"single-step", &sig, &v).is_ok());
    }

    #[test]
    fn test_one_time_enforcement() {
        let mut s = keygen_from_qkd(&material(7), 99, WotsParams::default()).unwrap();
        sign(b"first", &mut s).unwrap();
        assert!(s.is_used());
        match sign(b"second", &mut s) {
            Err(QdsError::OneTimeViolation { key_id }) => assert_eq!(key_id, 99),
            other => panic!("expected one-time violation, got {other:?}"),
        }
    }

    #[test]
    fn test_verification_matches_naive_oracle() {
        // Oracle: walk every chain from its seed with a bare loop, both
        // for the root and for each signature element's completion.
        let p = WotsParams::default();
        let mut s = keygen_from_qkd(&material(8), 0, p).unwrap();
        let seeds = s.chain_seeds.clone();
        let naive = |start: &Key256, steps: usize| {
            let mut v = *start;
            for _ in 0..steps {
                v = Key256::from_bytes(crate::primitives::sha256(v.as_bytes()));
            }
            v
        };
        let oracle_ends: Vec<Key256> = seeds.iter().map(|sd| naive(sd, 15)).collect();
        let v = compute_verification(&s);
        assert_eq!(v.root, compress_root(p.hash, &oracle_ends));

        let msg = b"oracle equivalence";
        let digest = p.hash.digest_parts(&[msg]);
        let sig = sign(msg, &mut s).unwrap();
        let chunks = full_chunks(&digest, &p);
        for ((&c, el), (seed, end)) in chunks
            .iter()
            .zip(&sig.elements)
            .zip(seeds.iter().zip(&oracle_ends))
        {
            assert_eq!(*el, naive(seed, c as usize));
            assert_eq!(naive(el, 15 - c as usize), *end);
        }
    }

    #[test]
    fn test_message_tamper_rejected() {
        let mut rng = rng::from_u64(9);
        let mut s = keygen_from_qkd(&random_bits(&mut rng, 256), 0, WotsParams::default())
            .unwrap();
        let v = compute_verification(&s);
        let msg: Vec<u8> = (0..64).map(|_| rng.random()).collect();
        let sig = sign(&msg, &mut s).unwrap();
        for _ in 0..100 {
            let mut bad = msg.clone();
            let pos = rng.random_range(0..bad.len());
            let flip: u8 = rng.random_range(1..=255);
            bad[pos] ^= flip;
            assert!(verify(&bad, &sig, &v).is_err());
        }
    }

    #[test]
    fn test_permuted_elements_rejected() {
        let mut s = keygen_from_qkd(&material(10), 0, WotsParams::default()).unwrap();
        let v = compute_verification(&s);
        let sig = sign(b"ordered", &mut s).unwrap();
        let mut permuted = sig.clone();
        permuted.elements.swap(0, 1);
        assert!(matches!(
            verify(b"ordered", &permuted, &v),
            Err(QdsError::RootMismatch)
        ));
    }

    #[test]
    fn test_wrong_element_count_reports_reason() {
        let mut s = keygen_from_qkd(&material(11), 0, WotsParams::default()).unwrap();
        let v = compute_verification(&s);
        let mut sig = sign(b"count", &mut s).unwrap();
        sig.elements.pop();
        match verify(b"count", &sig, &v) {
            Err(QdsError::ElementCount { expected: 67, got: 66 }) => {}
            other => panic!("expected element count error, got {other:?}"),
        }
    }

    #[test]
    fn test_checksum_blocks_chunk_increment_forgery() {
        // The classic Winternitz forgery: advance one message chain a
        // step (claiming chunk value c+1) while leaving the checksum
        // elements alone. The checksum over the forged digest drops by
        // one, so a checksum chain would need to run backwards.
        let p = WotsParams::default();
        let mut s = keygen_from_qkd(&material(12), 0, p).unwrap();
        let v = compute_verification(&s);
        let digest = p.hash.digest_parts(&[b"forgery target".as_slice()]);
        let sig = sign_digest(&digest, &mut s).unwrap();

        let chunks = full_chunks(&digest, &p);
        let target = chunks[..64].iter().position(|&c| c < 15).expect("some chunk below max");
        let mut forged_digest = digest;
        // Incrementing the nibble in the digest increments chunk `target`.
        let shift = if target % 2 == 0 { 4 } else { 0 };
        let byte = target / 2;
        let nibble = forged_digest[byte] >> shift & 0xF;
        forged_digest[byte] = forged_digest[byte] & !(0xF << shift) | (nibble + 1) << shift;

        let mut forged = sig.clone();
        forged.elements[target] = chain(p.hash, &forged.elements[target], 1);
        assert!(
            verify_digest(&forged_digest, &forged, &v).is_err(),
            "chunk-increment forgery must not verify"
        );
        // Sanity: the message chains alone would have passed; re-sign
        // honestly to confirm the forged digest is otherwise signable.
        let mut s2 = keygen_from_qkd(&material(12), 0, p).unwrap();
        let honest = sign_digest(&forged_digest, &mut s2).unwrap();
        assert!(verify_digest(&forged_digest, &honest, &v).is_ok());
        assert_eq!(honest.elements[target], forged.elements[target]);
    }

    #[test]
    fn test_signature_wire_roundtrip() {
        let mut s = keygen_from_qkd(&material(13), 0xDEAD, WotsParams::default()).unwrap();
        let sig = sign(b"wire", &mut s).unwrap();
        let bytes = encode_signature(&sig);
        assert_eq!(decode_signature(&bytes).unwrap(), sig);
    }

    #[test]
    fn test_verification_message_wire_roundtrip() {
        let (mut hub, _) = stores_with_shared_material(77);
        let s = keygen_from_qkd(&material(78), bind_key_id(1, 0), WotsParams::default())
            .unwrap();
        let msg = distribute_verification(&mut hub, 1, 2, &compute_verification(&s)).unwrap();
        let bytes = encode_verification_message(&msg);
        assert_eq!(decode_verification_message(&bytes).unwrap(), msg);

        // Every truncation point is reported, never panics.
        for cut in 0..bytes.len() {
            match decode_verification_message(&bytes[..cut]) {
                Err(QdsError::Truncated { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: expected truncation, got {other:?}"),
            }
        }
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(matches!(
            decode_verification_message(&extended),
            Err(QdsError::Truncated { .. })
        ));

        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(
            decode_verification_message(&wrong),
            Err(QdsError::BadMagic { .. })
        ));
    }

    #[test]
    fn test_signature_wire_truncation_offset() {
        let mut s = keygen_from_qkd(&material(14), 0, WotsParams::default()).unwrap();
        let sig = sign(b"wire", &mut s).unwrap();
        let bytes = encode_signature(&sig);
        match decode_signature(&bytes[..40]) {
            Err(QdsError::Truncated { offset, what }) => {
                // Header is 19 bytes; the cut lands inside element 0.
                assert_eq!(offset, 19);
                assert_eq!(what, "signature element");
            }
            other => panic!("expected truncation, got {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'?';
        assert!(matches!(decode_signature(&bad), Err(QdsError::BadMagic { .. })));
    }

    fn stores_with_shared_material(seed: u8) -> (KeyStore, KeyStore) {
        let mut hub = KeyStore::new(&[seed; 32]);
        let mut client = KeyStore::new(&[seed.wrapping_add(1); 32]);
        let mut bit_rng = rng::stream(&[seed; 32], &[b"material"]);
        for id in [1u32, 2] {
            let bits = random_bits(&mut bit_rng, 768 * 2);
            let block = SecretKeyBlock::new(bits, "s", 0, Provenance::Qkd).unwrap();
            hub.parse_session(&block, id).unwrap();
            if id == 2 {
                client.parse_session(&block, id).unwrap();
            }
        }
        (hub, client)
    }

    #[test]
    fn test_distribute_verification_honest_path() {
        let (mut hub, mut verifier_store) = stores_with_shared_material(20);
        // Signer 1's key material also lives in the hub store.
        let sign_material = hub
            .consume_component(1, Component::K, "qds-signing")
            .unwrap();
        let bits = BitString::from_bytes(sign_material.as_bytes(), 256);
        let mut s = keygen_from_qkd(&bits, bind_key_id(1, 0), WotsParams::default()).unwrap();
        let v = compute_verification(&s);
        let msg = distribute_verification(&mut hub, 1, 2, &v).unwrap();
        let mut registry = VerifierRegistry::new();
        let accepted = registry.accept(&mut verifier_store, &msg).unwrap();
        assert_eq!(accepted, v);
        let sig = sign(b"hello from client 1", &mut s).unwrap();
        assert!(verify(b"hello from client 1", &sig, &accepted).is_ok());
        // The verifier burned exactly one component, for this purpose.
        assert_eq!(verifier_store.audit().len(), 1);
        assert!(verifier_store.audit()[0].purpose.starts_with("qds-verification"));
    }

    #[test]
    fn test_distribute_tamper_rejected_and_burns_nothing() {
        let (mut hub, mut verifier_store) = stores_with_shared_material(21);
        let s = keygen_from_qkd(&material(22), bind_key_id(1, 0), WotsParams::default())
            .unwrap();
        let v = compute_verification(&s);
        let msg = distribute_verification(&mut hub, 1, 2, &v).unwrap();
        let mut registry = VerifierRegistry::new();
        // Flip each byte of the root in turn; all must fail the tag.
        for i in 0..32 {
            let mut bad = msg.clone();
            let mut root = *bad.key.root.as_bytes();
            root[i] ^= 0x01;
            bad.key.root = Key256::from_bytes(root);
            assert!(matches!(
                registry.accept(&mut verifier_store, &bad),
                Err(QdsError::AuthTag)
            ));
        }
        assert!(verifier_store.audit().is_empty());
        // The honest message still goes through afterwards.
        assert!(registry.accept(&mut verifier_store, &msg).is_ok());
    }

    #[test]
    fn test_distribute_replay_rejected_by_freshness() {
        let (mut hub, mut verifier_store) = stores_with_shared_material(23);
        let s1 = keygen_from_qkd(&material(24), bind_key_id(1, 0), WotsParams::default())
            .unwrap();
        let s2 = keygen_from_qkd(&material(25), bind_key_id(1, 1), WotsParams::default())
            .unwrap();
        let old = distribute_verification(&mut hub, 1, 2, &compute_verification(&s1)).unwrap();
        let new = distribute_verification(&mut hub, 1, 2, &compute_verification(&s2)).unwrap();
        let mut registry = VerifierRegistry::new();
        registry.accept(&mut verifier_store, &new).unwrap();
        match registry.accept(&mut verifier_store, &old) {
            Err(QdsError::StaleKeyId { got, latest }) => {
                assert_eq!(got, bind_key_id(1, 0));
                assert_eq!(latest, bind_key_id(1, 1));
            }
            other => panic!("expected stale key id, got {other:?}"),
        }
    }

    #[test]
    fn test_distribute_exhaustion_error() {
        let mut hub = KeyStore::new(&[26; 32]);
        let s = keygen_from_qkd(&material(27), 0, WotsParams::default()).unwrap();
        let v = compute_verification(&s);
        assert!(matches!(
            distribute_verification(&mut hub, 1, 2, &v),
            Err(QdsError::Qkm(QkmError::KeyExhaustion { .. }))
        ));
    }
}
