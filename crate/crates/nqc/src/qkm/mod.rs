//! Quantum key management: the layer between distilled QKD output and the
//! protocols that spend it.
//!
//! Distilled key blocks parse into (K, L, M) triples. The hub establishes
//! a pair key between clients a and b by publishing P = L_a ⊕ K_b together
//! with a confirmation hash A = H(K_b ∥ M_a); client a recovers K_b as
//! P ⊕ L_a and checks A before trusting it. Group keys wrap a hub-drawn
//! key the same way for every member. Every component is one-time use,
//! tracked by per-component flags and an append-only audit log.

mod persist;
mod table;

pub use table::{export_lookup_table, read_table, write_table};

use crate::bits::BitString;
use crate::primitives::{ct_eq, HashAlg, Key256};
use crate::postproc::{Provenance, SecretKeyBlock};
use crate::rng::{self, DetRng};
use rand::Rng;
use std::collections::BTreeMap;
use thiserror::Error;

/// Client identifiers are plain integers below [`GROUP_ID_BASE`]; group
/// identifiers live in the high-bit namespace so the two can never collide
/// in a published record.
pub type ClientId = u32;

/// First identifier of the group-key namespace.
pub const GROUP_ID_BASE: u32 = 0x8000_0000;

#[derive(Debug, Error)]
pub enum QkmError {
    #[error("no unconsumed {component} material for client {client_id}")]
    KeyExhaustion { client_id: ClientId, component: Component },
    #[error("component {component} of client {client_id} epoch {epoch} already consumed")]
    ComponentConsumed { client_id: ClientId, epoch: u64, component: Component },
    #[error("no triple for client {client_id} at epoch {epoch}")]
    MissingTriple { client_id: ClientId, epoch: u64 },
    #[error("pair-key confirmation failure; the derived key does not match its published hash and must not be used")]
    Confirmation,
    #[error("group needs at least 2 distinct members, got {0}")]
    GroupSize(usize),
    #[error("client id {0} collides with the group-id namespace")]
    ClientIdRange(ClientId),
    #[error("key block provenance {0:?} cannot be parsed into triples")]
    BlockProvenance(Provenance),
    #[error("store file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("file truncated at byte offset {offset} while reading {what}")]
    Truncated { offset: u64, what: &'static str },
    #[error("bad magic {got:?}, expected {expected:?}")]
    BadMagic { got: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("table integrity hash mismatch")]
    TableIntegrity,
    #[error("table record {index} out of order: epoch {epoch} not above {previous} for pair {from_id}->{to_id}")]
    TableEpochOrder { index: usize, from_id: u32, to_id: u32, epoch: u64, previous: u64 },
    #[error("key store authentication failed (wrong passphrase or corrupted file)")]
    StoreAuth,
    #[error("malformed store body at byte offset {offset}: {what}")]
    StoreDecode { offset: u64, what: &'static str },
}

/// One of the three roles inside a [`KeyTriple`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    K,
    L,
    M,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::K, Component::L, Component::M];

    pub fn index(self) -> usize {
        match self {
            Component::K => 0,
            Component::L => 1,
            Component::M => 2,
        }
    }

    fn from_index(i: u8) -> Option<Component> {
        match i {
            0 => Some(Component::K),
            1 => Some(Component::L),
            2 => Some(Component::M),
            _ => None,
        }
    }
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Component::K => "K",
            Component::L => "L",
            Component::M => "M",
        })
    }
}

/// Three 256-bit keys parsed from one distilled block, with one-time-use
/// flags per component.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyTriple {
    pub client_id: ClientId,
    pub epoch: u64,
    pub k: Key256,
    pub l: Key256,
    pub m: Key256,
    pub consumed: [bool; 3],
}

impl KeyTriple {
    pub fn component(&self, c: Component) -> &Key256 {
        match c {
            Component::K => &self.k,
            Component::L => &self.l,
            Component::M => &self.m,
        }
    }

    pub fn is_consumed(&self, c: Component) -> bool {
        self.consumed[c.index()]
    }
}

/// Published pair-key record: non-secret by construction, but derivation
/// refuses the key unless the confirmation hash checks out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairKeyRecord {
    pub from_id: ClientId,
    /// Target client, or a group id for group-key records.
    pub to_id: u32,
    pub epoch: u64,
    pub p: Key256,
    pub a: Key256,
}

/// One entry of the append-only consumption log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConsumptionEvent {
    pub client_id: ClientId,
    pub epoch: u64,
    pub component: Component,
    pub purpose: String,
}

/// Key store: triples per (client, epoch), parse residue, and the audit
/// log. Mutations are `&mut self` (single-writer); derivation helpers that
/// take published records and a caller-held triple are pure functions.
#[derive(Clone)]
pub struct KeyStore {
    hash: HashAlg,
    triples: BTreeMap<(ClientId, u64), KeyTriple>,
    residual: BTreeMap<ClientId, BitString>,
    next_epoch: BTreeMap<ClientId, u64>,
    audit: Vec<ConsumptionEvent>,
    entropy: DetRng,
    next_group: u32,
}

impl std::fmt::Debug for KeyStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyStore")
            .field("triples", &self.triples.len())
            .field("audit_events", &self.audit.len())
            .field("next_group", &self.next_group)
            .finish_non_exhaustive()
    }
}

impl KeyStore {
    /// A store with its own entropy stream (used for group keys and key
    /// splitting). Client-side stores that never mint keys still take a
    /// seed; they simply never draw from it.
    pub fn new(entropy_seed: &[u8; 32]) -> KeyStore {
        KeyStore {
            hash: HashAlg::default(),
            triples: BTreeMap::new(),
            residual: BTreeMap::new(),
            next_epoch: BTreeMap::new(),
            audit: Vec::new(),
            entropy: rng::stream(entropy_seed, &[b"keystore-entropy"]),
            next_group: GROUP_ID_BASE,
        }
    }

    pub fn with_hash(mut self, hash: HashAlg) -> KeyStore {
        self.hash = hash;
        self
    }

    pub fn hash_alg(&self) -> HashAlg {
        self.hash
    }

    /// Splits a distilled block into consecutive 768-bit triples for
    /// `client_id`, carrying any residue into the next call. Returns the
    /// freshly minted triples (possibly none; key accumulates).
    pub fn parse_session(
        &mut self,
        block: &SecretKeyBlock,
        client_id: ClientId,
    ) -> Result<Vec<KeyTriple>, QkmError> {
        if block.provenance != Provenance::Qkd {
            return Err(QkmError::BlockProvenance(block.provenance));
        }
        if client_id >= GROUP_ID_BASE {
            return Err(QkmError::ClientIdRange(client_id));
        }
        let carry = self.residual.entry(client_id).or_default();
        carry.extend_from(&block.bits);
        let (segments, rest) = split_triples(carry);
        *carry = rest;
        let epoch = self.next_epoch.entry(client_id).or_insert(0);
        let mut minted = Vec::with_capacity(segments.len());
        for [k, l, m] in segments {
            let triple = KeyTriple {
                client_id,
                epoch: *epoch,
                k,
                l,
                m,
                consumed: [false; 3],
            };
            self.triples.insert((client_id, *epoch), triple.clone());
            *epoch += 1;
            minted.push(triple);
        }
        Ok(minted)
    }

    /// Hub side of pair-key establishment from `from` to `to`: publishes
    /// P = L_from ⊕ K_to and A = H(K_to ∥ M_from), consuming those three
    /// components at the lowest epoch where both sides have them free.
    pub fn publish_pair_key(
        &mut self,
        from: ClientId,
        to: ClientId,
    ) -> Result<PairKeyRecord, QkmError> {
        let epoch = self.lowest_pair_epoch(from, to)?;
        let purpose = format!("pair-key {from}->{to}");
        let l_from = self.consume(from, epoch, Component::L, &purpose)?;
        let m_from = self.consume(from, epoch, Component::M, &purpose)?;
        let k_to = self.consume(to, epoch, Component::K, &purpose)?;
        let rec = PairKeyRecord {
            from_id: from,
            to_id: to,
            epoch,
            p: l_from.xor(&k_to),
            a: confirmation_hash(self.hash, &k_to, &m_from),
        };
        debug_assert_eq!(rec.p.xor(&l_from), k_to);
        Ok(rec)
    }

    /// The `from` side of derivation: looks up the caller's own triple at
    /// the record's epoch, recovers the key, and consumes L and M only if
    /// confirmation succeeds (a tampered record burns nothing).
    pub fn derive_as(&mut self, rec: &PairKeyRecord) -> Result<Key256, QkmError> {
        let triple = self
            .triples
            .get(&(rec.from_id, rec.epoch))
            .ok_or(QkmError::MissingTriple { client_id: rec.from_id, epoch: rec.epoch })?;
        for c in [Component::L, Component::M] {
            if triple.is_consumed(c) {
                return Err(QkmError::ComponentConsumed {
                    client_id: rec.from_id,
                    epoch: rec.epoch,
                    component: c,
                });
            }
        }
        let key = derive_pair_key(rec, &triple.l, &triple.m, self.hash)?;
        let purpose = format!("pair-derive {}->{}", rec.from_id, rec.to_id);
        self.consume(rec.from_id, rec.epoch, Component::L, &purpose)?;
        self.consume(rec.from_id, rec.epoch, Component::M, &purpose)?;
        Ok(key)
    }

    /// The `to` side of a pair key: the shared key is the client's own K
    /// at the record's epoch, consumed here.
    pub fn accept_as(&mut self, rec: &PairKeyRecord) -> Result<Key256, QkmError> {
        let purpose = format!("pair-accept {}->{}", rec.from_id, rec.to_id);
        self.consume(rec.to_id, rec.epoch, Component::K, &purpose)
    }

    /// Hub side of group keying: draws a fresh key G and wraps it for
    /// every member as P_i = L_i ⊕ G, A_i = H(G ∥ M_i). All-or-nothing:
    /// if any member lacks material, nothing is consumed.
    pub fn publish_group_key(
        &mut self,
        members: &[ClientId],
    ) -> Result<(u32, Vec<PairKeyRecord>), QkmError> {
        let mut distinct: Vec<ClientId> = members.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(QkmError::GroupSize(distinct.len()));
        }
        // Reserve every member's epoch before consuming anything.
        let mut epochs = Vec::with_capacity(distinct.len());
        for &member in &distinct {
            epochs.push(self.lowest_with(member, &[Component::L, Component::M])?);
        }
        let group_id = self.next_group;
        self.next_group += 1;
        let g = Key256::from_rng(&mut self.entropy);
        let purpose = format!("group-key {group_id:#010x}");
        let mut records = Vec::with_capacity(distinct.len());
        for (&member, &epoch) in distinct.iter().zip(&epochs) {
            let l = self.consume(member, epoch, Component::L, &purpose)?;
            let m = self.consume(member, epoch, Component::M, &purpose)?;
            records.push(PairKeyRecord {
                from_id: member,
                to_id: group_id,
                epoch,
                p: l.xor(&g),
                a: confirmation_hash(self.hash, &g, &m),
            });
        }
        Ok((group_id, records))
    }

    /// Consumes one component for a caller-stated purpose and returns its
    /// value. Upper layers (signatures, channel keys, splitting) obtain
    /// all key material through this choke point so the audit log is
    /// complete.
    pub fn consume_component(
        &mut self,
        client: ClientId,
        component: Component,
        purpose: &str,
    ) -> Result<Key256, QkmError> {
        let epoch = self.lowest_with(client, &[component])?;
        self.consume(client, epoch, component, purpose)
    }

    /// Consumes a component and splits it into two XOR shares using the
    /// store's entropy.
    pub fn split_component(
        &mut self,
        client: ClientId,
        component: Component,
        purpose: &str,
    ) -> Result<(Key256, Key256), QkmError> {
        let value = self.consume_component(client, component, purpose)?;
        let mut seed = [0u8; 32];
        self.entropy.fill_bytes(&mut seed);
        Ok(split_hub_key(&value, &seed))
    }

    pub fn audit(&self) -> &[ConsumptionEvent] {
        &self.audit
    }

    pub fn triples(&self) -> impl Iterator<Item = &KeyTriple> {
        self.triples.values()
    }

    pub fn triple(&self, client: ClientId, epoch: u64) -> Option<&KeyTriple> {
        self.triples.get(&(client, epoch))
    }

    pub fn residual_bits(&self, client: ClientId) -> usize {
        self.residual.get(&client).map_or(0, BitString::len)
    }

    /// Unconsumed component counts (K, L, M) for a client.
    pub fn available(&self, client: ClientId) -> [u64; 3] {
        let mut counts = [0u64; 3];
        for triple in self.client_triples(client) {
            for c in Component::ALL {
                if !triple.is_consumed(c) {
                    counts[c.index()] += 1;
                }
            }
        }
        counts
    }

    fn client_triples(&self, client: ClientId) -> impl Iterator<Item = &KeyTriple> {
        self.triples
            .range((client, 0)..=(client, u64::MAX))
            .map(|(_, t)| t)
    }

    fn lowest_with(&self, client: ClientId, free: &[Component]) -> Result<u64, QkmError> {
        self.client_triples(client)
            .find(|t| free.iter().all(|&c| !t.is_consumed(c)))
            .map(|t| t.epoch)
            .ok_or(QkmError::KeyExhaustion { client_id: client, component: free[0] })
    }

    /// Lowest epoch where `from` still has L and M free and `to` still
    /// has K free, so both sides consume the same epoch.
    fn lowest_pair_epoch(&self, from: ClientId, to: ClientId) -> Result<u64, QkmError> {
        for t in self.client_triples(from) {
            if t.is_consumed(Component::L) || t.is_consumed(Component::M) {
                continue;
            }
            match self.triples.get(&(to, t.epoch)) {
                Some(peer) if !peer.is_consumed(Component::K) => return Ok(t.epoch),
                _ => continue,
            }
        }
        // Distinguish which side ran dry for the error message.
        if self.lowest_with(from, &[Component::L, Component::M]).is_err() {
            return Err(QkmError::KeyExhaustion { client_id: from, component: Component::L });
        }
        Err(QkmError::KeyExhaustion { client_id: to, component: Component::K })
    }

    pub(crate) fn consume(
        &mut self,
        client: ClientId,
        epoch: u64,
        component: Component,
        purpose: &str,
    ) -> Result<Key256, QkmError> {
        let triple = self
            .triples
            .get_mut(&(client, epoch))
            .ok_or(QkmError::MissingTriple { client_id: client, epoch })?;
        if triple.consumed[component.index()] {
            return Err(QkmError::ComponentConsumed { client_id: client, epoch, component });
        }
        triple.consumed[component.index()] = true;
        let value = *triple.component(component);
        self.audit.push(ConsumptionEvent {
            client_id: client,
            epoch,
            component,
            purpose: purpose.to_owned(),
        });
        Ok(value)
    }
}

/// Confirmation hash A = H(K ∥ M).
fn confirmation_hash(hash: HashAlg, k: &Key256, m: &Key256) -> Key256 {
    Key256::from_bytes(hash.digest_parts(&[k.as_bytes(), m.as_bytes()]))
}

/// Pure derivation for the publishing side's counterpart: recovers
/// K = P ⊕ L_own and returns it only if the confirmation hash matches
/// (constant-time compare).
pub fn derive_pair_key(
    rec: &PairKeyRecord,
    l_own: &Key256,
    m_own: &Key256,
    hash: HashAlg,
) -> Result<Key256, QkmError> {
    let key = rec.p.xor(l_own);
    let expect = confirmation_hash(hash, &key, m_own);
    if ct_eq(expect.as_bytes(), rec.a.as_bytes()) {
        Ok(key)
    } else {
        Err(QkmError::Confirmation)
    }
}

/// Two-share XOR split: share1 is uniform from the seed, share2 completes
/// the component. Either share alone is independent of the component.
pub fn split_hub_key(component: &Key256, seed: &[u8; 32]) -> (Key256, Key256) {
    let mut share_rng = rng::stream(seed, &[b"split-share"]);
    let share1 = Key256::from_rng(&mut share_rng);
    let share2 = component.xor(&share1);
    (share1, share2)
}

/// Recombines two shares from [`split_hub_key`].
pub fn recombine(share1: &Key256, share2: &Key256) -> Key256 {
    share1.xor(share2)
}

/// Cuts as many whole 768-bit triples as possible off the front of
/// `bits`, returning the triples' (K, L, M) segments in order and the
/// remainder.
fn split_triples(bits: &BitString) -> (Vec<[Key256; 3]>, BitString) {
    let whole = bits.len() / 768;
    let mut out = Vec::with_capacity(whole);
    for t in 0..whole {
        let mut keys = [Key256::ZERO; 3];
        for (s, key) in keys.iter_mut().enumerate() {
            let seg = bits.slice(t * 768 + s * 256, 256);
            let bytes: [u8; 32] = seg.to_bytes().try_into().expect("256 bits is 32 bytes");
            *key = Key256::from_bytes(bytes);
        }
        out.push(keys);
    }
    let rest = bits.slice(whole * 768, bits.len() - whole * 768);
    (out, rest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bits::random_bits;
    use proptest::prelude::*;
    use rand::Rng;

    fn block_of(bits: BitString, epoch: u64) -> SecretKeyBlock {
        SecretKeyBlock::new(bits, "test-session", epoch, Provenance::Qkd).unwrap()
    }

    fn store_with_keys(clients: &[ClientId], triples_each: usize, seed: u8) -> KeyStore {
        let mut store = KeyStore::new(&[seed; 32]);
        let mut bit_rng = rng::stream(&[seed; 32], &[b"material"]);
        for &c in clients {
            let bits = random_bits(&mut bit_rng, 768 * triples_each);
            store.parse_session(&block_of(bits, 0), c).unwrap();
        }
        store
    }

    #[test]
    fn test_parse_one_triple_segment_order() {
        let mut store = KeyStore::new(&[1; 32]);
        let mut rng = rng::from_u64(11);
        let bits = random_bits(&mut rng, 768);
        let minted = store.parse_session(&block_of(bits.clone(), 0), 7).unwrap();
        assert_eq!(minted.len(), 1);
        let t = &minted[0];
        assert_eq!(t.epoch, 0);
        let seg = |i: usize| {
            let b: [u8; 32] = bits.slice(i * 256, 256).to_bytes().try_into().unwrap();
            Key256::from_bytes(b)
        };
        assert_eq!(t.k, seg(0));
        assert_eq!(t.l, seg(1));
        assert_eq!(t.m, seg(2));
    }

    #[test]
    fn test_parse_three_triples_disjoint() {
        let mut store = KeyStore::new(&[1; 32]);
        let mut rng = rng::from_u64(12);
        let minted = store
            .parse_session(&block_of(random_bits(&mut rng, 2304), 0), 1)
            .unwrap();
        assert_eq!(minted.len(), 3);
        assert_eq!(
            minted.iter().map(|t| t.epoch).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        // All nine components pairwise distinct (random 256-bit material).
        let mut seen = Vec::new();
        for t in &minted {
            for c in Component::ALL {
                assert!(!seen.contains(t.component(c)), "segment reused");
                seen.push(*t.component(c));
            }
        }
    }

    #[test]
    fn test_split_boundary_767_bits() {
        let mut rng = rng::from_u64(13);
        let bits = random_bits(&mut rng, 767);
        let (triples, rest) = split_triples(&bits);
        assert!(triples.is_empty());
        assert_eq!(rest, bits);
    }

    #[test]
    fn test_parse_residual_carryover() {
        let mut store = KeyStore::new(&[1; 32]);
        let mut rng = rng::from_u64(14);
        // 512 bits: no triple yet.
        let first = random_bits(&mut rng, 512);
        assert!(store
            .parse_session(&block_of(first.clone(), 0), 3)
            .unwrap()
            .is_empty());
        assert_eq!(store.residual_bits(3), 512);
        // 512 more: one triple, 256 left over; the triple's front half is
        // the first block's bits.
        let second = random_bits(&mut rng, 512);
        let minted = store.parse_session(&block_of(second.clone(), 1), 3).unwrap();
        assert_eq!(minted.len(), 1);
        assert_eq!(store.residual_bits(3), 256);
        let mut joined = first;
        joined.extend_from(&second);
        let expect_k: [u8; 32] = joined.slice(0, 256).to_bytes().try_into().unwrap();
        assert_eq!(minted[0].k, Key256::from_bytes(expect_k));
    }

    #[test]
    fn test_parse_rejects_split_share_provenance() {
        let mut store = KeyStore::new(&[1; 32]);
        let mut rng = rng::from_u64(15);
        let block = SecretKeyBlock::new(
            random_bits(&mut rng, 768),
            "shares",
            0,
            Provenance::SplitShare,
        )
        .unwrap();
        assert!(matches!(
            store.parse_session(&block, 1),
            Err(QkmError::BlockProvenance(Provenance::SplitShare))
        ));
    }

    #[test]
    fn test_pair_key_roundtrip_exact() {
        let mut hub = store_with_keys(&[1, 2], 2, 20);
        let k_b = hub.triple(2, 0).unwrap().k;
        let rec = hub.publish_pair_key(1, 2).unwrap();
        assert_eq!(rec.epoch, 0);
        // The from side derives exactly K_b.
        let mut alice = store_with_keys(&[1, 2], 2, 20);
        let key = alice.derive_as(&rec).unwrap();
        assert_eq!(key, k_b);
        // The to side holds the same key natively.
        let mut bob = store_with_keys(&[1, 2], 2, 20);
        assert_eq!(bob.accept_as(&rec).unwrap(), k_b);
    }

    #[test]
    fn test_pair_key_zero_l_exposes_k() {
        // With L_a = 0 the published P equals K_b directly.
        let mut store = KeyStore::new(&[2; 32]);
        let mut rng = rng::from_u64(21);
        let mut bits_a = BitString::zeros(256); // K_a (unused)
        bits_a.extend_from(&BitString::zeros(256)); // L_a = 0
        bits_a.extend_from(&random_bits(&mut rng, 256)); // M_a
        store.parse_session(&block_of(bits_a, 0), 1).unwrap();
        store
            .parse_session(&block_of(random_bits(&mut rng, 768), 0), 2)
            .unwrap();
        let k_b = store.triple(2, 0).unwrap().k;
        let rec = store.publish_pair_key(1, 2).unwrap();
        assert_eq!(rec.p, k_b);
    }

    #[test]
    fn test_pair_key_formula_p_xor_l_is_k() {
        let mut hub = store_with_keys(&[4, 5], 1, 22);
        let l_a = hub.triple(4, 0).unwrap().l;
        let k_b = hub.triple(5, 0).unwrap().k;
        let rec = hub.publish_pair_key(4, 5).unwrap();
        assert_eq!(rec.p.xor(&l_a), k_b);
    }

    #[test]
    fn test_pair_key_directions_differ() {
        let mut hub = store_with_keys(&[1, 2], 2, 23);
        let ab = hub.publish_pair_key(1, 2).unwrap();
        let ba = hub.publish_pair_key(2, 1).unwrap();
        // Complementary components at the same epoch: both direction keys
        // exist, and they differ.
        assert_eq!(ab.epoch, ba.epoch);
        let mut alice = store_with_keys(&[1, 2], 2, 23);
        let mut bob = store_with_keys(&[1, 2], 2, 23);
        let key_ab = alice.derive_as(&ab).unwrap();
        let key_ba = bob.derive_as(&ba).unwrap();
        assert_ne!(key_ab, key_ba);
    }

    #[test]
    fn test_pair_key_tamper_rejected() {
        let mut hub = store_with_keys(&[1, 2], 1, 24);
        let rec = hub.publish_pair_key(1, 2).unwrap();
        let me = store_with_keys(&[1, 2], 1, 24);
        let triple = me.triple(1, 0).unwrap();
        // A sample of single-bit flips on each of P and A (the exhaustive
        // 512-case sweep runs in the acceptance suite).
        for bit in [0usize, 1, 77, 200, 255] {
            let mut bad = rec.clone();
            let mut p = *bad.p.as_bytes();
            p[bit / 8] ^= 1 << (bit % 8);
            bad.p = Key256::from_bytes(p);
            assert!(matches!(
                derive_pair_key(&bad, &triple.l, &triple.m, HashAlg::Sha256),
                Err(QkmError::Confirmation)
            ));
            let mut bad = rec.clone();
            let mut a = *bad.a.as_bytes();
            a[bit / 8] ^= 1 << (bit % 8);
            bad.a = Key256::from_bytes(a);
            assert!(matches!(
                derive_pair_key(&bad, &triple.l, &triple.m, HashAlg::Sha256),
                Err(QkmError::Confirmation)
            ));
        }
    }

    #[test]
    fn test_tampered_record_burns_nothing() {
        let mut hub = store_with_keys(&[1, 2], 1, 25);
        let rec = hub.publish_pair_key(1, 2).unwrap();
        let mut alice = store_with_keys(&[1, 2], 1, 25);
        let mut bad = rec.clone();
        let mut p = *bad.p.as_bytes();
        p[0] ^= 1;
        bad.p = Key256::from_bytes(p);
        assert!(alice.derive_as(&bad).is_err());
        assert!(alice.audit().is_empty());
        // The honest record still works afterwards.
        assert!(alice.derive_as(&rec).is_ok());
    }

    #[test]
    fn test_pair_key_exhaustion() {
        let mut hub = store_with_keys(&[1, 2], 1, 26);
        hub.publish_pair_key(1, 2).unwrap();
        // L_1 and M_1 are spent; a second a->b pair key cannot form.
        assert!(matches!(
            hub.publish_pair_key(1, 2),
            Err(QkmError::KeyExhaustion { client_id: 1, .. })
        ));
        // But the reverse direction still can.
        assert!(hub.publish_pair_key(2, 1).is_ok());
    }

    #[test]
    fn test_double_accept_rejected() {
        let mut hub = store_with_keys(&[1, 2], 1, 27);
        let rec = hub.publish_pair_key(1, 2).unwrap();
        let mut bob = store_with_keys(&[1, 2], 1, 27);
        bob.accept_as(&rec).unwrap();
        assert!(matches!(
            bob.accept_as(&rec),
            Err(QkmError::ComponentConsumed { component: Component::K, .. })
        ));
    }

    #[test]
    fn test_group_key_two_members_agree() {
        let mut hub = store_with_keys(&[1, 2], 1, 30);
        let (group_id, records) = hub.publish_group_key(&[2, 1]).unwrap();
        assert!(group_id >= GROUP_ID_BASE);
        assert_eq!(records.len(), 2);
        let mut derived = Vec::new();
        for rec in &records {
            let mut member = store_with_keys(&[1, 2], 1, 30);
            derived.push(member.derive_as(rec).unwrap());
        }
        assert_eq!(derived[0], derived[1]);
    }

    #[test]
    fn test_group_key_tamper_isolated_to_member() {
        let clients: Vec<ClientId> = (1..=10).collect();
        let mut hub = store_with_keys(&clients, 1, 31);
        let (_, mut records) = hub.publish_group_key(&clients).unwrap();
        // Tamper member 4's P.
        let idx = records.iter().position(|r| r.from_id == 4).unwrap();
        let mut p = *records[idx].p.as_bytes();
        p[9] ^= 0x10;
        records[idx].p = Key256::from_bytes(p);
        let mut keys = Vec::new();
        for rec in &records {
            let mut member = store_with_keys(&clients, 1, 31);
            match member.derive_as(rec) {
                Ok(k) => keys.push(k),
                Err(QkmError::Confirmation) => assert_eq!(rec.from_id, 4),
                Err(e) => panic!("unexpected error {e}"),
            }
        }
        assert_eq!(keys.len(), 9);
        assert!(keys.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn test_group_rejects_singleton_and_duplicates() {
        let mut hub = store_with_keys(&[1, 2], 1, 32);
        assert!(matches!(
            hub.publish_group_key(&[1]),
            Err(QkmError::GroupSize(1))
        ));
        assert!(matches!(
            hub.publish_group_key(&[1, 1, 1]),
            Err(QkmError::GroupSize(1))
        ));
    }

    #[test]
    fn test_group_all_or_nothing() {
        let mut hub = store_with_keys(&[1, 2], 1, 33);
        // Exhaust client 2's L by a pair key 2->1.
        hub.publish_pair_key(2, 1).unwrap();
        let audit_len = hub.audit().len();
        assert!(matches!(
            hub.publish_group_key(&[1, 2]),
            Err(QkmError::KeyExhaustion { client_id: 2, .. })
        ));
        // Nothing further was consumed.
        assert_eq!(hub.audit().len(), audit_len);
        assert!(!hub.triple(1, 0).unwrap().is_consumed(Component::L));
    }

    #[test]
    fn test_split_recombine() {
        let mut rng = rng::from_u64(40);
        for _ in 0..16 {
            let x = Key256::from_rng(&mut rng);
            let mut seed = [0u8; 32];
            rng.fill_bytes(&mut seed);
            let (s1, s2) = split_hub_key(&x, &seed);
            assert_eq!(recombine(&s1, &s2), x);
            assert_eq!(s2, x.xor(&s1));
        }
    }

    #[test]
    fn test_split_share_bit_frequencies() {
        // Over many splits of one fixed key, each share1 bit is fair.
        let x = Key256::from_bytes([0xFF; 32]);
        let mut rng = rng::from_u64(41);
        let trials = 10_000u32;
        let mut ones = [0u32; 256];
        for _ in 0..trials {
            let mut seed = [0u8; 32];
            rng.fill_bytes(&mut seed);
            let (s1, _) = split_hub_key(&x, &seed);
            for (i, count) in ones.iter_mut().enumerate() {
                *count += (s1.as_bytes()[i / 8] >> (i % 8) & 1) as u32;
            }
        }
        let sigma = (trials as f64 * 0.25).sqrt();
        for (i, &count) in ones.iter().enumerate() {
            let dev = (count as f64 - trials as f64 / 2.0).abs();
            assert!(dev <= 3.0 * sigma * 1.6, "bit {i}: {count}/{trials}");
        }
    }

    #[test]
    fn test_split_component_consumes_and_audits() {
        let mut hub = store_with_keys(&[1], 1, 42);
        let (s1, s2) = hub.split_component(1, Component::K, "hub-split").unwrap();
        let k = hub.triple(1, 0).unwrap().k;
        assert_eq!(recombine(&s1, &s2), k);
        assert!(hub.triple(1, 0).unwrap().is_consumed(Component::K));
        assert_eq!(hub.audit().len(), 1);
        assert_eq!(hub.audit()[0].purpose, "hub-split");
    }

    #[test]
    fn test_available_counts() {
        let mut hub = store_with_keys(&[1, 2], 2, 43);
        assert_eq!(hub.available(1), [2, 2, 2]);
        hub.publish_pair_key(1, 2).unwrap();
        assert_eq!(hub.available(1), [2, 1, 1]);
        assert_eq!(hub.available(2), [1, 2, 2]);
    }

    proptest! {
        /// Any sequence of operations leaves every (client, epoch,
        /// component) at most once in the audit log.
        #[test]
        fn test_one_time_use_replay(ops in proptest::collection::vec(0u8..6, 1..40), seed in 0u8..255) {
            let clients = [1u32, 2, 3];
            let mut hub = store_with_keys(&clients, 3, seed);
            for op in ops {
                // Errors (exhaustion) are fine; the invariant is about
                // what lands in the log.
                let _ = match op {
                    0 => hub.publish_pair_key(1, 2).map(|_| ()),
                    1 => hub.publish_pair_key(2, 1).map(|_| ()),
                    2 => hub.publish_pair_key(2, 3).map(|_| ()),
                    3 => hub.publish_group_key(&[1, 2, 3]).map(|_| ()),
                    4 => hub.consume_component(3, Component::K, "probe").map(|_| ()),
                    5 => hub.split_component(1, Component::M, "split").map(|_| ()),
                    _ => unreachable!(),
                };
            }
            let mut seen = std::collections::HashSet::new();
            for ev in hub.audit() {
                prop_assert!(
                    seen.insert((ev.client_id, ev.epoch, ev.component.index())),
                    "component consumed twice: {ev:?}"
                );
            }
        }
    }
}
