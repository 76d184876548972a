//! Desk-scale test bed for network-centric quantum communications.
//!
//! The crate simulates a hub-and-spoke QKD network end to end:
//!
//! * [`photonic`] — seeded decoy-state BB84 pulse transmission, lossy fiber,
//!   and the four-detector receiver with dark counts and after-pulse
//!   blocking.
//! * [`postproc`] — sifting, shuffling, QBER estimation, decoy-state yield
//!   bounds, rate-adaptive LDPC reconciliation, Toeplitz privacy
//!   amplification, and transcript authentication.
//! * [`qkm`] — parsing session key into (K, L, M) triples, pair-key and
//!   group-key establishment through the hub, two-share key splitting, and
//!   encrypted key stores plus published lookup tables.
//! * [`qds`] — Winternitz one-time signatures keyed from QKD material, with
//!   hub-mediated verification-key distribution.
//! * [`channel`] — the bump-in-the-wire proxy: synchrophasor frame codec,
//!   authenticated encryption, replay defense, and latency metering.
//! * [`orchestrator`] — network scheduling, the per-epoch pipeline, reports,
//!   and the command-line interface.

pub mod bits;
pub mod channel;
pub mod orchestrator;
pub mod primitives;
pub mod rng;

pub mod photonic;
pub mod postproc;
pub mod qds;
pub mod qkm;
