//! Secured message channel: authenticated encryption of frame streams
//! under 256-bit keys handed down from the key-management layer, plus a
//! synchrophasor traffic harness and a bump-in-the-wire proxy.
//!
//! Each direction of a stream runs under its own (encryption, MAC) key
//! pair, rotated by epoch. Frames carry (direction, epoch, sequence) in
//! the clear; the tag covers header and ciphertext, sequence numbers are
//! strictly increasing per direction, and every error path fails closed.

mod pmu;
mod proxy;

pub use pmu::{decode_pmu, encode_pmu, pmu_source, Phasor, Scenario, SynchrophasorFrame};
pub use proxy::{
    proxy_run, proxy_serve, write_metrics_csv, LatencyReport, LatencySample, ProxyMode,
    ProxyOptions, ProxyOutcome,
};

use crate::primitives::{ct_eq, CipherAlg, Key256, MacAlg};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("sequence {seq} would reuse a nonce (next allowed is {next})")]
    NonceReuse { seq: u64, next: u64 },
    #[error("frame tag verification failed")]
    TagMismatch,
    #[error("sequence regression: got {got}, already accepted {last}")]
    SequenceRegression { got: u64, last: u64 },
    #[error("epoch regression: got {got}, channel is at {current}")]
    EpochRegression { got: u64, current: u64 },
    #[error("frame direction {got} does not belong to this channel ({expected})")]
    DirectionMismatch { got: u32, expected: u32 },
    #[error("no keys available for epoch {epoch}")]
    KeyExhaustion { epoch: u64 },
    #[error("field out of range: {0}")]
    FieldRange(&'static str),
    #[error("crc mismatch: computed {computed:#06x}, frame carries {carried:#06x}")]
    BadCrc { computed: u16, carried: u16 },
    #[error("frame truncated at byte offset {offset} while reading {what}")]
    Truncated { offset: u64, what: &'static str },
    #[error("bad frame sync {got:#06x}, expected {expected:#06x}")]
    BadSync { got: u16, expected: u16 },
    #[error("unsupported frame version {0}")]
    Version(u8),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// The two keys a direction uses within one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochKeys {
    pub enc: Key256,
    pub mac: Key256,
}

/// Supplies per-epoch key pairs for one direction. Implementations are
/// random-access by epoch so an opener can resolve a frame's claimed
/// epoch before committing any state, and a sealer can prefetch the next
/// epoch without blocking the data path.
pub trait KeyFeed {
    fn keys_for_epoch(&mut self, epoch: u64) -> Result<EpochKeys, ChannelError>;
}

/// A finite, preloaded feed: epoch e maps to the e'th entry.
#[derive(Clone, Debug)]
pub struct VecFeed {
    epochs: Vec<EpochKeys>,
}

impl VecFeed {
    pub fn new(epochs: Vec<EpochKeys>) -> VecFeed {
        VecFeed { epochs }
    }
}

impl KeyFeed for VecFeed {
    fn keys_for_epoch(&mut self, epoch: u64) -> Result<EpochKeys, ChannelError> {
        usize::try_from(epoch)
            .ok()
            .and_then(|i| self.epochs.get(i))
            .copied()
            .ok_or(ChannelError::KeyExhaustion { epoch })
    }
}

pub const FRAME_MAGIC: u16 = 0xA5C1;
pub const FRAME_VERSION: u8 = 1;
/// Wire header: magic, version, direction, epoch, sequence, length.
pub const FRAME_HEADER_LEN: usize = 2 + 1 + 4 + 8 + 8 + 4;
pub const TAG_LEN: usize = 16;
/// Frames sealed per epoch before the sealer rotates keys.
pub const DEFAULT_REKEY_THRESHOLD: u64 = 1 << 16;

/// An encrypted, authenticated frame. The tag covers the wire header and
/// the ciphertext.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SecuredFrame {
    pub version: u8,
    pub direction_id: u32,
    pub epoch: u64,
    pub seq: u64,
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl SecuredFrame {
    fn header_bytes(&self) -> [u8; FRAME_HEADER_LEN] {
        let mut h = [0u8; FRAME_HEADER_LEN];
        h[0..2].copy_from_slice(&FRAME_MAGIC.to_be_bytes());
        h[2] = self.version;
        h[3..7].copy_from_slice(&self.direction_id.to_be_bytes());
        h[7..15].copy_from_slice(&self.epoch.to_be_bytes());
        h[15..23].copy_from_slice(&self.seq.to_be_bytes());
        h[23..27].copy_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        h
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + self.ciphertext.len() + TAG_LEN);
        out.extend_from_slice(&self.header_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    /// Decodes one frame from the front of `data`, returning it with the
    /// number of bytes consumed.
    pub fn decode(data: &[u8]) -> Result<(SecuredFrame, usize), ChannelError> {
        if data.len() < FRAME_HEADER_LEN {
            return Err(ChannelError::Truncated { offset: data.len() as u64, what: "frame header" });
        }
        let magic = u16::from_be_bytes([data[0], data[1]]);
        if magic != FRAME_MAGIC {
            return Err(ChannelError::BadSync { got: magic, expected: FRAME_MAGIC });
        }
        let version = data[2];
        if version != FRAME_VERSION {
            return Err(ChannelError::Version(version));
        }
        let direction_id = u32::from_be_bytes(data[3..7].try_into().unwrap());
        let epoch = u64::from_be_bytes(data[7..15].try_into().unwrap());
        let seq = u64::from_be_bytes(data[15..23].try_into().unwrap());
        let len = u32::from_be_bytes(data[23..27].try_into().unwrap()) as usize;
        let total = FRAME_HEADER_LEN + len + TAG_LEN;
        if data.len() < total {
            return Err(ChannelError::Truncated { offset: data.len() as u64, what: "frame body" });
        }
        let ciphertext = data[FRAME_HEADER_LEN..FRAME_HEADER_LEN + len].to_vec();
        let tag: [u8; TAG_LEN] = data[FRAME_HEADER_LEN + len..total].try_into().unwrap();
        Ok((SecuredFrame { version, direction_id, epoch, seq, ciphertext, tag }, total))
    }
}

/// CTR nonce: direction and sequence, zero-padded. Unique per (epoch
/// keys, direction, sequence) as long as sequences never repeat within a
/// direction, which the sealer enforces.
fn frame_iv(direction_id: u32, seq: u64) -> [u8; 16] {
    let mut iv = [0u8; 16];
    iv[0..4].copy_from_slice(&direction_id.to_be_bytes());
    iv[4..12].copy_from_slice(&seq.to_be_bytes());
    iv
}

fn frame_tag(frame: &SecuredFrame, mac_key: &Key256) -> [u8; TAG_LEN] {
    let full = MacAlg::HmacSha256.tag(mac_key, &[&frame.header_bytes(), &frame.ciphertext]);
    full[..TAG_LEN].try_into().expect("tag truncation length")
}

/// Encrypt-then-MAC for one frame. Stateless; sequence discipline is the
/// caller's (see [`Sealer`]).
pub fn seal_frame(
    plaintext: &[u8],
    direction_id: u32,
    epoch: u64,
    seq: u64,
    keys: &EpochKeys,
) -> SecuredFrame {
    let mut ciphertext = plaintext.to_vec();
    CipherAlg::Aes256Ctr.apply(&keys.enc, &frame_iv(direction_id, seq), &mut ciphertext);
    let mut frame = SecuredFrame {
        version: FRAME_VERSION,
        direction_id,
        epoch,
        seq,
        ciphertext,
        tag: [0; TAG_LEN],
    };
    frame.tag = frame_tag(&frame, &keys.mac);
    frame
}

/// Verifies the tag (constant-time) before touching the ciphertext, then
/// decrypts.
pub fn open_frame(frame: &SecuredFrame, keys: &EpochKeys) -> Result<Vec<u8>, ChannelError> {
    let expect = frame_tag(frame, &keys.mac);
    if !ct_eq(&expect, &frame.tag) {
        return Err(ChannelError::TagMismatch);
    }
    let mut plaintext = frame.ciphertext.clone();
    CipherAlg::Aes256Ctr.apply(&keys.enc, &frame_iv(frame.direction_id, frame.seq), &mut plaintext);
    Ok(plaintext)
}

/// Running totals kept by sealers, openers, and proxies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ChannelCounters {
    pub sealed: u64,
    pub opened: u64,
    pub tag_failures: u64,
    pub replay_alarms: u64,
    pub epoch_regressions: u64,
    pub exhaustion_drops: u64,
    pub misrouted: u64,
}

/// Sending side of one direction: monotone sequence numbers, automatic
/// rekey every `threshold` frames, next-epoch keys prefetched so rotation
/// never stalls the stream.
pub struct Sealer<F: KeyFeed> {
    direction_id: u32,
    feed: F,
    epoch: u64,
    keys: EpochKeys,
    prefetched: Option<EpochKeys>,
    next_seq: u64,
    sealed_this_epoch: u64,
    threshold: u64,
    pub counters: ChannelCounters,
}

impl<F: KeyFeed> Sealer<F> {
    pub fn new(direction_id: u32, mut feed: F, threshold: u64) -> Result<Sealer<F>, ChannelError> {
        let keys = feed.keys_for_epoch(0)?;
        let prefetched = feed.keys_for_epoch(1).ok();
        Ok(Sealer {
            direction_id,
            feed,
            epoch: 0,
            keys,
            prefetched,
            next_seq: 0,
            sealed_this_epoch: 0,
            threshold: threshold.max(1),
            counters: ChannelCounters::default(),
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn seal(&mut self, plaintext: &[u8]) -> Result<SecuredFrame, ChannelError> {
        if self.sealed_this_epoch >= self.threshold {
            self.advance_epoch()?;
        }
        let frame = seal_frame(plaintext, self.direction_id, self.epoch, self.next_seq, &self.keys);
        self.next_seq += 1;
        self.sealed_this_epoch += 1;
        self.counters.sealed += 1;
        Ok(frame)
    }

    /// Seals at an explicit sequence number, skipping forward if needed.
    /// Reusing a sequence is a hard error: it would repeat a CTR nonce.
    pub fn seal_at(&mut self, plaintext: &[u8], seq: u64) -> Result<SecuredFrame, ChannelError> {
        if seq < self.next_seq {
            return Err(ChannelError::NonceReuse { seq, next: self.next_seq });
        }
        self.next_seq = seq;
        self.seal(plaintext)
    }

    fn advance_epoch(&mut self) -> Result<(), ChannelError> {
        let next_epoch = self.epoch + 1;
        let keys = match self.prefetched.take() {
            Some(k) => k,
            None => self.feed.keys_for_epoch(next_epoch)?,
        };
        self.epoch = next_epoch;
        self.keys = keys;
        self.sealed_this_epoch = 0;
        self.prefetched = self.feed.keys_for_epoch(next_epoch + 1).ok();
        Ok(())
    }
}

/// Receiving side of one direction: authenticates before trusting any
/// header claim, tracks the newest accepted sequence across epochs, and
/// rejects epoch or sequence regressions as replays.
pub struct Opener<F: KeyFeed> {
    direction_id: u32,
    feed: F,
    epoch: u64,
    keys: EpochKeys,
    last_seq: Option<u64>,
    pub counters: ChannelCounters,
}

impl<F: KeyFeed> Opener<F> {
    pub fn new(direction_id: u32, mut feed: F) -> Result<Opener<F>, ChannelError> {
        let keys = feed.keys_for_epoch(0)?;
        Ok(Opener {
            direction_id,
            feed,
            epoch: 0,
            keys,
            last_seq: None,
            counters: ChannelCounters::default(),
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn open(&mut self, frame: &SecuredFrame) -> Result<Vec<u8>, ChannelError> {
        if frame.direction_id != self.direction_id {
            return Err(ChannelError::DirectionMismatch {
                got: frame.direction_id,
                expected: self.direction_id,
            });
        }
        if frame.epoch < self.epoch {
            self.counters.epoch_regressions += 1;
            return Err(ChannelError::EpochRegression { got: frame.epoch, current: self.epoch });
        }
        // Resolve the claimed epoch's keys without committing state: a
        // forged header must not advance the channel.
        let keys = if frame.epoch == self.epoch {
            self.keys
        } else {
            self.feed.keys_for_epoch(frame.epoch)?
        };
        let plaintext = match open_frame(frame, &keys) {
            Ok(p) => p,
            Err(e) => {
                self.counters.tag_failures += 1;
                return Err(e);
            }
        };
        if let Some(last) = self.last_seq {
            if frame.seq <= last {
                self.counters.replay_alarms += 1;
                return Err(ChannelError::SequenceRegression { got: frame.seq, last });
            }
        }
        if frame.epoch > self.epoch {
            self.epoch = frame.epoch;
            self.keys = keys;
        }
        self.last_seq = Some(frame.seq);
        self.counters.opened += 1;
        Ok(plaintext)
    }
}
