//! Hub-and-spoke network control plane: schedules time-multiplexed
//! clients onto the shared receiver, drives each epoch through the full
//! stack (pulse transmission, detection, sifting, error estimation,
//! reconciliation, bound estimation, privacy amplification), lands the
//! distilled key material in hub and client key stores, and reports one
//! metrics row per client per epoch.
//!
//! Every run is a pure function of (configuration, master seed): the
//! master seed fans out through a labeled hash tree keyed by client id
//! and epoch, so adding a client never perturbs the others' streams.

pub mod cli;
mod config;
mod schedule;
mod trace;

pub use config::{ClientEntry, NetworkConfig, OutputPaths, ProxyConfig};
pub use schedule::{pattern_for, schedule};
pub use trace::{read_trace, write_trace, TraceSession, TraceWriter};

use crate::bits;
use crate::channel::ChannelError;
use crate::photonic::{
    propagate_detect, transmit_scheduled, ChannelConfig, ConfigError, DecoyLevel,
    DetectionRecord, TransmitRecord,
};
use crate::postproc::{
    collect_decoy_stats, decoy_bounds, estimate_qber, final_key_length, privacy_amplify,
    reconcile, shuffle, sift, LeakageLedger, PostprocError, Provenance, SecretKeyBlock,
};
use crate::qds::QdsError;
use crate::qkm::{KeyStore, QkmError};
use crate::rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("config error in {field}: {message}")]
    Config { field: String, message: String },
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("channel: {0}")]
    Photonic(#[from] ConfigError),
    #[error("post-processing: {0}")]
    Postproc(#[from] PostprocError),
    #[error("key management: {0}")]
    Qkm(#[from] QkmError),
    #[error("signature: {0}")]
    Qds(#[from] QdsError),
    #[error("secured channel: {0}")]
    Channel(#[from] ChannelError),
    #[error("protocol failure: {0}")]
    Protocol(String),
    #[error("trace file invalid at byte {offset}: {what}")]
    TraceDecode { offset: u64, what: String },
}

impl OrchestratorError {
    /// Process exit code: 0 success, 2 config error, 3 protocol failure,
    /// 4 key exhaustion.
    pub fn exit_code(&self) -> u8 {
        match self {
            OrchestratorError::Config { .. }
            | OrchestratorError::Io(_)
            | OrchestratorError::Photonic(_)
            | OrchestratorError::TraceDecode { .. } => 2,
            OrchestratorError::Protocol(_) => 3,
            OrchestratorError::Postproc(e) => match e {
                PostprocError::SampleFraction(_)
                | PostprocError::EmptySample { .. }
                | PostprocError::QberHintRange(_)
                | PostprocError::OutLenRange { .. }
                | PostprocError::SeedLength { .. }
                | PostprocError::KeyBlockAlignment(_)
                | PostprocError::AuthKeyLength(_) => 2,
                PostprocError::DecoyPrecondition(_)
                | PostprocError::ReconcileVerification { .. } => 3,
            },
            OrchestratorError::Qkm(e) => qkm_exit_code(e),
            OrchestratorError::Qds(e) => qds_exit_code(e),
            OrchestratorError::Channel(e) => match e {
                ChannelError::KeyExhaustion { .. } => 4,
                ChannelError::Io(_)
                | ChannelError::FieldRange(_)
                | ChannelError::Truncated { .. }
                | ChannelError::BadSync { .. }
                | ChannelError::Version(_) => 2,
                _ => 3,
            },
        }
    }
}

fn qkm_exit_code(e: &QkmError) -> u8 {
    match e {
        QkmError::KeyExhaustion { .. } | QkmError::ComponentConsumed { .. } => 4,
        QkmError::Confirmation
        | QkmError::StoreAuth
        | QkmError::TableIntegrity
        | QkmError::TableEpochOrder { .. } => 3,
        _ => 2,
    }
}

fn qds_exit_code(e: &QdsError) -> u8 {
    match e {
        QdsError::InsufficientMaterial { .. } => 4,
        QdsError::Qkm(inner) => qkm_exit_code(inner),
        QdsError::UnsupportedWidth(_)
        | QdsError::Truncated { .. }
        | QdsError::BadMagic { .. }
        | QdsError::Version(_) => 2,
        _ => 3,
    }
}

/// One client's metrics for one epoch. `wall_ms` is measured, so report
/// writers zero it unless timings were explicitly requested; everything
/// else is a deterministic function of config and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub client_id: u32,
    pub epoch: u64,
    pub pulses_sent: u64,
    pub clicks: u64,
    pub sifted_bits: u64,
    pub qber: f64,
    pub y1_lower: f64,
    pub e1_upper: f64,
    pub leaked_bits: u64,
    pub final_key_bits: u64,
    pub wall_ms: f64,
}

/// CSV column order; fixed and documented, never reordered.
pub const REPORT_COLUMNS: [&str; 11] = [
    "client_id",
    "epoch",
    "pulses_sent",
    "clicks",
    "sifted_bits",
    "qber",
    "y1_lower",
    "e1_upper",
    "leaked_bits",
    "final_key_bits",
    "wall_ms",
];

impl EpochReport {
    fn csv_row(&self, timings: bool) -> String {
        let wall = if timings { self.wall_ms } else { 0.0 };
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{},{},{:.3}",
            self.client_id,
            self.epoch,
            self.pulses_sent,
            self.clicks,
            self.sifted_bits,
            self.qber,
            self.y1_lower,
            self.e1_upper,
            self.leaked_bits,
            self.final_key_bits,
            wall
        )
    }

    /// Copy with the measured field cleared, for deterministic output.
    pub fn without_timing(&self) -> EpochReport {
        EpochReport { wall_ms: 0.0, ..self.clone() }
    }
}

/// Renders reports as CSV in [`REPORT_COLUMNS`] order. With `timings`
/// false the wall-time column is zeroed so the bytes depend only on
/// (config, seed).
pub fn reports_to_csv(reports: &[EpochReport], timings: bool) -> String {
    let mut out = REPORT_COLUMNS.join(",");
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row(timings));
        out.push('\n');
    }
    out
}

/// JSON mirror of the CSV fields.
pub fn reports_to_json(reports: &[EpochReport], timings: bool) -> String {
    let rows: Vec<EpochReport> = if timings {
        reports.to_vec()
    } else {
        reports.iter().map(EpochReport::without_timing).collect()
    };
    serde_json::to_string_pretty(&rows).expect("reports serialize")
}

/// Everything a network run produces in memory. Stores are returned
/// populated; persisting them is the caller's decision.
pub struct RunOutcome {
    pub reports: Vec<EpochReport>,
    pub hub_store: KeyStore,
    pub client_stores: BTreeMap<u32, KeyStore>,
    pub warnings: Vec<String>,
}

/// Runs `cfg.epochs` epochs for every configured client. Each client
/// transmits on its scheduled pulse positions; post-processing runs per
/// (client, epoch); distilled key blocks land in the hub store and the
/// owning client's store. A client whose epoch yields zero key produces
/// a warning and the run continues. If `cfg.paths.trace` is set, the
/// pulse and detection records of every session are appended there.
pub fn run_network(cfg: &NetworkConfig) -> Result<RunOutcome, OrchestratorError> {
    cfg.validate()?;
    let master = rng::master_seed(cfg.master_seed);
    let mut hub_store = KeyStore::new(&rng::child_seed(&master, &[b"hub-store"]));
    let mut client_stores: BTreeMap<u32, KeyStore> = cfg
        .clients
        .iter()
        .map(|c| {
            let seed = rng::child_seed(&master, &[b"client-store", &c.id.to_le_bytes()]);
            (c.id, KeyStore::new(&seed))
        })
        .collect();
    let mut tracer = match &cfg.paths.trace {
        Some(path) => Some(TraceWriter::create(path)?),
        None => None,
    };

    let order = cfg.client_order();
    let mut reports = Vec::new();
    let mut warnings = Vec::new();
    for epoch in 0..cfg.epochs {
        for (position, &id) in order.iter().enumerate() {
            let entry = cfg.client(id).expect("validated schedule");
            let started = Instant::now();
            let outcome = run_client_epoch(
                &entry.channel,
                id,
                epoch,
                pattern_for(position, order.len()),
                cfg,
                &master,
            )?;
            let wall_ms = started.elapsed().as_secs_f64() * 1000.0;
            if let Some(w) = outcome.warning {
                warnings.push(w);
            }
            if let Some(block) = &outcome.key {
                hub_store.parse_session(block, id)?;
                client_stores
                    .get_mut(&id)
                    .expect("store exists for every configured client")
                    .parse_session(block, id)?;
            }
            if let Some(t) = &mut tracer {
                t.append(id, epoch, &outcome.tx, &outcome.det)?;
            }
            debug_assert!(outcome.report_base.final_key_bits <= outcome.report_base.sifted_bits);
            reports.push(EpochReport { wall_ms, ..outcome.report_base });
        }
    }
    if let Some(t) = tracer {
        t.finish()?;
    }
    Ok(RunOutcome { reports, hub_store, client_stores, warnings })
}

struct EpochOutcome {
    report_base: EpochReport,
    key: Option<SecretKeyBlock>,
    warning: Option<String>,
    tx: Vec<TransmitRecord>,
    det: Vec<DetectionRecord>,
}

/// Labeled child seed for one (client, epoch, stage).
fn stage_seed(master: &[u8; 32], id: u32, epoch: u64, stage: &[u8]) -> [u8; 32] {
    rng::child_seed(
        master,
        &[b"client", &id.to_le_bytes(), b"epoch", &epoch.to_le_bytes(), stage],
    )
}

fn run_client_epoch(
    ch: &ChannelConfig,
    id: u32,
    epoch: u64,
    pattern: crate::photonic::PulsePattern,
    cfg: &NetworkConfig,
    master: &[u8; 32],
) -> Result<EpochOutcome, OrchestratorError> {
    let tx = transmit_scheduled(
        ch,
        cfg.pulses_per_client,
        cfg.decoy_weights,
        stage_seed(master, id, epoch, b"tx"),
        pattern,
    )?;
    let det = propagate_detect(&tx, ch, stage_seed(master, id, epoch, b"rx"))?;
    let session = format!("c{id}-e{epoch}");
    let block = sift(&tx, &det, ch, session.clone());

    let base = EpochReport {
        client_id: id,
        epoch,
        pulses_sent: tx.len() as u64,
        clicks: det.len() as u64,
        sifted_bits: block.len() as u64,
        qber: 0.0,
        y1_lower: 0.0,
        e1_upper: 0.0,
        leaked_bits: 0,
        final_key_bits: 0,
        wall_ms: 0.0,
    };
    let zero_key = |report_base: EpochReport, why: String, tx, det| EpochOutcome {
        report_base,
        key: None,
        warning: Some(format!("client {id} epoch {epoch}: zero key ({why})")),
        tx,
        det,
    };

    if block.is_empty() {
        return Ok(zero_key(base, "no sifted bits".into(), tx, det));
    }
    let stats = collect_decoy_stats(&tx, &block);
    let shuffled = shuffle(&block, stage_seed(master, id, epoch, b"shuffle"));
    let (qber, remaining) = match estimate_qber(
        &shuffled,
        cfg.sample_fraction,
        stage_seed(master, id, epoch, b"sample"),
    ) {
        Ok(pair) => pair,
        Err(PostprocError::EmptySample { .. }) => {
            return Ok(zero_key(base, "too few sifted bits to sample".into(), tx, det));
        }
        Err(e) => return Err(e.into()),
    };
    let mut ledger = LeakageLedger {
        sampled_bits: (shuffled.len() - remaining.len()) as u64,
        ..LeakageLedger::default()
    };
    let base = EpochReport { qber, leaked_bits: ledger.total(), ..base };

    let signal_idx = remaining.level_positions(DecoyLevel::Signal);
    let (signal, _) = remaining.take_indices(&signal_idx);
    if signal.is_empty() {
        return Ok(zero_key(base, "no signal-level bits survived".into(), tx, det));
    }

    // The sampled estimate is noisy; pad it upward so the code-rate
    // choice stays on the reliable side of its operating point.
    let sigma = (qber * (1.0 - qber) / ledger.sampled_bits as f64).max(0.0).sqrt();
    let hint = qber + 3.0 * sigma;
    if hint >= 0.11 {
        return Ok(zero_key(base, format!("error rate too high to reconcile ({hint:.3})"), tx, det));
    }
    let corrected = match reconcile(&signal, hint) {
        Ok(outcome) => {
            ledger.syndrome_bits = outcome.leaked_bits;
            outcome.corrected
        }
        Err(PostprocError::ReconcileVerification { leaked_bits }) => {
            ledger.syndrome_bits = leaked_bits;
            None
        }
        Err(e) => return Err(e.into()),
    };
    let base = EpochReport { leaked_bits: ledger.total(), ..base };
    let Some(corrected) = corrected else {
        return Ok(zero_key(base, "reconciliation failed".into(), tx, det));
    };

    let bounds = match decoy_bounds(&stats) {
        Ok(b) => b,
        Err(e) => {
            return Ok(zero_key(base, format!("decoy bounds unavailable: {e}"), tx, det));
        }
    };
    let base = EpochReport { y1_lower: bounds.y1_lower, e1_upper: bounds.e1_upper, ..base };
    let capacity = final_key_length(
        corrected.len() as u64,
        bounds.q1_lower,
        bounds.e1_upper,
        stats.gain(DecoyLevel::Signal),
        ledger.total(),
        64,
    );
    let out_len = (capacity.min(cfg.epoch_target_bits) / 256 * 256) as usize;
    if out_len == 0 {
        return Ok(zero_key(base, format!("distillable length {capacity} below one triple"), tx, det));
    }

    let mut pa_rng = rng::stream(&stage_seed(master, id, epoch, b"pa"), &[b"toeplitz-seed"]);
    let seed_bits = bits::random_bits(&mut pa_rng, corrected.len() + out_len - 1);
    let key_bits = privacy_amplify(&corrected, out_len, &seed_bits)?;
    let key = SecretKeyBlock::new(key_bits, session, epoch, Provenance::Qkd)?;
    Ok(EpochOutcome {
        report_base: EpochReport { final_key_bits: out_len as u64, ..base },
        key: Some(key),
        warning: None,
        tx,
        det,
    })
}
