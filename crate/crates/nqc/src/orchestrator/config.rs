//! Network configuration: one TOML file describes the hub, its clients,
//! the transmission schedule, and every output path. Field names and
//! units are normative; unknown fields are rejected so typos surface as
//! schema errors naming the offending field.

use super::OrchestratorError;
use crate::channel::ProxyMode;
use crate::photonic::ChannelConfig;
use crate::qkm::GROUP_ID_BASE;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Top-level network description. All simulation entry points are pure
/// functions of this struct plus the master seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Root of the deterministic seed tree. `--seed` overrides it.
    pub master_seed: u64,
    /// Epochs per `simulate` run. `--epochs` overrides it.
    pub epochs: u64,
    /// Signal pulses each client transmits per epoch (its own scheduled
    /// slots only).
    pub pulses_per_client: u64,
    /// Cap on distilled key bits per client per epoch; multiple of 256.
    pub epoch_target_bits: u64,
    /// Fraction of sifted bits disclosed for error estimation, in (0, 1).
    pub sample_fraction: f64,
    /// Probability of sending each intensity, ordered
    /// [vacuum, decoy, signal]; must sum to 1.
    pub decoy_weights: [f64; 3],
    /// Passphrase sealing the on-disk key stores.
    pub store_passphrase: String,
    /// Round-robin transmission order; defaults to the clients in listed
    /// order. Must name every client exactly once.
    pub schedule: Option<Vec<u32>>,
    pub clients: Vec<ClientEntry>,
    pub paths: OutputPaths,
    pub proxy: Option<ProxyConfig>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            master_seed: 7,
            epochs: 1,
            pulses_per_client: 100_000,
            epoch_target_bits: 768,
            sample_fraction: 0.1,
            decoy_weights: [0.02, 0.30, 0.68],
            store_passphrase: String::from("nqc-test-bed"),
            schedule: None,
            clients: Vec::new(),
            paths: OutputPaths::default(),
            proxy: None,
        }
    }
}

/// One client transmitter and its link parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientEntry {
    pub id: u32,
    #[serde(default)]
    pub channel: ChannelConfig,
}

/// Where run artifacts land. Everything is optional; unset outputs are
/// simply not written.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputPaths {
    /// Per-epoch report rows.
    pub reports_csv: Option<PathBuf>,
    /// Encrypted hub key store.
    pub hub_store: Option<PathBuf>,
    /// Directory for per-client encrypted stores
    /// (`client-<id>.nqck` inside it).
    pub client_store_dir: Option<PathBuf>,
    /// Binary pulse/detection trace for later replay.
    pub trace: Option<PathBuf>,
    /// Pair-key lookup table.
    pub table: Option<PathBuf>,
    /// Proxy per-frame timing.
    pub metrics_csv: Option<PathBuf>,
    /// Signature-verification freshness state.
    pub registry: Option<PathBuf>,
}

impl OutputPaths {
    pub fn client_store(&self, id: u32) -> Option<PathBuf> {
        self.client_store_dir.as_ref().map(|d| d.join(format!("client-{id}.nqck")))
    }
}

/// Settings for the `proxy` subcommand: which side of the link this
/// process is, whose keys it uses, and the TCP endpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyConfig {
    /// `seal` on the sensor side, `open` on the consumer side.
    pub role: ProxyMode,
    /// Key direction: sealing consumes `from_id`'s components, opening
    /// consumes `to_id`'s.
    pub from_id: u32,
    pub to_id: u32,
    pub listen: String,
    pub forward: String,
    #[serde(default = "default_direction")]
    pub direction_id: u32,
    #[serde(default = "default_rekey")]
    pub rekey_threshold: u64,
    #[serde(default = "default_hold")]
    pub hold_limit: usize,
}

fn default_direction() -> u32 {
    1
}

fn default_rekey() -> u64 {
    crate::channel::DEFAULT_REKEY_THRESHOLD
}

fn default_hold() -> usize {
    64
}

impl NetworkConfig {
    pub fn load(path: &Path) -> Result<NetworkConfig, OrchestratorError> {
        let text = std::fs::read_to_string(path).map_err(|e| OrchestratorError::Config {
            field: "config".into(),
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        let cfg: NetworkConfig =
            toml::from_str(&text).map_err(|e| OrchestratorError::Config {
                field: "config".into(),
                message: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let fail = |field: &str, message: String| {
            Err(OrchestratorError::Config { field: field.into(), message })
        };
        if self.clients.is_empty() {
            return fail("clients", "at least one client is required".into());
        }
        for (i, c) in self.clients.iter().enumerate() {
            if c.id == 0 {
                return fail(&format!("clients[{i}].id"), "0 is reserved for the hub".into());
            }
            if c.id >= GROUP_ID_BASE {
                return fail(
                    &format!("clients[{i}].id"),
                    format!("ids at or above {GROUP_ID_BASE:#x} belong to group keys"),
                );
            }
            if self.clients[..i].iter().any(|prev| prev.id == c.id) {
                return fail(&format!("clients[{i}].id"), format!("duplicate client id {}", c.id));
            }
            if let Err(e) = c.channel.validate() {
                return fail(&format!("clients[{i}].channel"), e.to_string());
            }
        }
        let sum: f64 = self.decoy_weights.iter().sum();
        if self.decoy_weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || (sum - 1.0).abs() > 1e-9
        {
            return fail(
                "decoy_weights",
                format!("weights must be nonnegative and sum to 1, got sum {sum}"),
            );
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction < 1.0) {
            return fail(
                "sample_fraction",
                format!("must lie strictly between 0 and 1, got {}", self.sample_fraction),
            );
        }
        if self.epoch_target_bits == 0 || self.epoch_target_bits % 256 != 0 {
            return fail(
                "epoch_target_bits",
                format!("must be a positive multiple of 256, got {}", self.epoch_target_bits),
            );
        }
        if self.pulses_per_client == 0 {
            return fail("pulses_per_client", "must be at least 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs", "must be at least 1".into());
        }
        if self.store_passphrase.is_empty() {
            return fail("store_passphrase", "must not be empty".into());
        }
        if let Some(order) = &self.schedule {
            let mut expected: Vec<u32> = self.clients.iter().map(|c| c.id).collect();
            let mut got = order.clone();
            expected.sort_unstable();
            got.sort_unstable();
            if expected != got {
                return fail(
                    "schedule",
                    "must list every configured client id exactly once".into(),
                );
            }
        }
        if let Some(p) = &self.proxy {
            let known = |id: u32| self.clients.iter().any(|c| c.id == id);
            if !known(p.from_id) {
                return fail("proxy.from_id", format!("{} is not a configured client", p.from_id));
            }
            if !known(p.to_id) {
                return fail("proxy.to_id", format!("{} is not a configured client", p.to_id));
            }
            if p.from_id == p.to_id {
                return fail("proxy.to_id", "endpoints must be two distinct clients".into());
            }
            if p.rekey_threshold == 0 {
                return fail("proxy.rekey_threshold", "must be at least 1".into());
            }
            if p.listen.is_empty() || p.forward.is_empty() {
                return fail("proxy.listen", "listen and forward addresses are required".into());
            }
        }
        Ok(())
    }

    /// Transmission order: the explicit schedule, or clients as listed.
    pub fn client_order(&self) -> Vec<u32> {
        match &self.schedule {
            Some(order) => order.clone(),
            None => self.clients.iter().map(|c| c.id).collect(),
        }
    }

    pub fn client(&self, id: u32) -> Option<&ClientEntry> {
        self.clients.iter().find(|c| c.id == id)
    }
}
