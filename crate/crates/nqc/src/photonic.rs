//! Seeded discrete-event simulation of decoy-state BB84 transmission.
//!
//! A client emits polarization qubits at three mean-photon levels through
//! lossy fiber to a hub receiver with four Geiger-mode detectors (H, V, D,
//! A). The receiver applies a passive 50/50 basis split per arriving photon,
//! fires dark counts in every active slot, and blocks all four detectors for
//! a fixed window after any click. Pulses occupy every `slots_per_pulse`-th
//! slot inside the duty-cycle-active head of each superframe.
//!
//! Everything is driven by ChaCha streams derived from an explicit seed:
//! identical (tx, cfg, seed) produce byte-identical output.

use crate::rng::{self, DetRng};
use rand::RngExt;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// BB84 preparation/measurement basis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    Rectilinear,
    Diagonal,
}

/// Receiver detector, one per BB84 state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Detector {
    H,
    V,
    D,
    A,
}

impl Detector {
    pub fn from_outcome(basis: Basis, bit: bool) -> Detector {
        match (basis, bit) {
            (Basis::Rectilinear, false) => Detector::H,
            (Basis::Rectilinear, true) => Detector::V,
            (Basis::Diagonal, false) => Detector::D,
            (Basis::Diagonal, true) => Detector::A,
        }
    }

    pub fn basis(&self) -> Basis {
        match self {
            Detector::H | Detector::V => Basis::Rectilinear,
            Detector::D | Detector::A => Basis::Diagonal,
        }
    }

    pub fn bit(&self) -> bool {
        matches!(self, Detector::V | Detector::A)
    }

    fn mask(&self) -> u8 {
        match self {
            Detector::H => 1,
            Detector::V => 2,
            Detector::D => 4,
            Detector::A => 8,
        }
    }

    fn from_index(i: usize) -> Detector {
        [Detector::H, Detector::V, Detector::D, Detector::A][i]
    }
}

/// Decoy-state intensity level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoyLevel {
    Vacuum,
    Decoy,
    Signal,
}

impl DecoyLevel {
    pub const ALL: [DecoyLevel; 3] = [DecoyLevel::Vacuum, DecoyLevel::Decoy, DecoyLevel::Signal];

    pub fn index(&self) -> usize {
        *self as usize
    }
}

/// Mean photon number per decoy level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuTable {
    pub vacuum: f64,
    pub decoy: f64,
    pub signal: f64,
}

impl Default for MuTable {
    fn default() -> Self {
        MuTable { vacuum: 0.0, decoy: 0.1, signal: 0.5 }
    }
}

impl MuTable {
    pub fn mu(&self, level: DecoyLevel) -> f64 {
        match level {
            DecoyLevel::Vacuum => self.vacuum,
            DecoyLevel::Decoy => self.decoy,
            DecoyLevel::Signal => self.signal,
        }
    }
}

/// Resolution for slots where more than one detector clicks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DoubleClickPolicy {
    /// Standard squashing: record a uniformly random bit in a basis drawn
    /// from the clicking detectors (conservative for security accounting).
    #[default]
    RandomAssign,
    /// Drop the slot entirely (calibration mode).
    StrictDiscard,
}

/// Physical-layer parameters for one client-hub link.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    /// Fiber span, km.
    pub fiber_length_km: f64,
    /// Fiber loss, dB/km (0.2 is standard at 1550 nm).
    pub attenuation_db_per_km: f64,
    /// Polarization misalignment flip probability.
    pub intrinsic_error: f64,
    /// Detector quantum efficiency η.
    pub detector_efficiency: f64,
    /// Dark count probability per detector per time slot.
    pub dark_prob: f64,
    /// After-pulse blocking applied to all four detectors, µs.
    pub blocking_time_us: f64,
    /// Pulse repetition rate, Hz.
    pub pulse_rate_hz: f64,
    /// Active fraction at the head of each superframe, (0, 1].
    pub duty_cycle: f64,
    /// Detection time slot width, ns.
    pub slot_width_ns: f64,
    /// Superframe period, µs.
    pub superframe_us: f64,
    /// Mean photon number per decoy level.
    pub mu: MuTable,
    /// Double-click resolution.
    pub double_click: DoubleClickPolicy,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            fiber_length_km: 50.0,
            attenuation_db_per_km: 0.2,
            intrinsic_error: 0.01,
            detector_efficiency: 0.15,
            dark_prob: 1e-5,
            blocking_time_us: 50.0,
            pulse_rate_hz: 10e6,
            duty_cycle: 0.2,
            slot_width_ns: 1.0,
            superframe_us: 1000.0,
            mu: MuTable::default(),
            double_click: DoubleClickPolicy::RandomAssign,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{field} must be a probability in [0, 1], got {value}")]
    ProbabilityRange { field: &'static str, value: f64 },
    #[error("{field} must be positive, got {value}")]
    NonPositive { field: &'static str, value: f64 },
    #[error("{field} must be non-negative, got {value}")]
    Negative { field: &'static str, value: f64 },
    #[error("duty_cycle must lie in (0, 1], got {0}")]
    DutyRange(f64),
    #[error("mean photon levels must satisfy 0 <= vacuum <= decoy <= signal")]
    MuOrder,
    #[error("slot geometry unusable: {0}")]
    SlotGeometry(String),
    #[error("decoy weights must be non-negative and sum to 1 (got sum {0})")]
    WeightSum(f64),
    #[error("n_pulses must be positive")]
    NoPulses,
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let probs = [
            ("intrinsic_error", self.intrinsic_error),
            ("detector_efficiency", self.detector_efficiency),
            ("dark_prob", self.dark_prob),
        ];
        for (field, value) in probs {
            if !(0.0..=1.0).contains(&value) || !value.is_finite() {
                return Err(ConfigError::ProbabilityRange { field, value });
            }
        }
        if self.fiber_length_km < 0.0 || !self.fiber_length_km.is_finite() {
            return Err(ConfigError::Negative { field: "fiber_length_km", value: self.fiber_length_km });
        }
        if self.attenuation_db_per_km < 0.0 || !self.attenuation_db_per_km.is_finite() {
            return Err(ConfigError::Negative { field: "attenuation_db_per_km", value: self.attenuation_db_per_km });
        }
        if self.blocking_time_us < 0.0 || !self.blocking_time_us.is_finite() {
            return Err(ConfigError::Negative { field: "blocking_time_us", value: self.blocking_time_us });
        }
        for (field, value) in [
            ("pulse_rate_hz", self.pulse_rate_hz),
            ("slot_width_ns", self.slot_width_ns),
            ("superframe_us", self.superframe_us),
        ] {
            if value <= 0.0 || !value.is_finite() {
                return Err(ConfigError::NonPositive { field, value });
            }
        }
        if !(self.duty_cycle > 0.0 && self.duty_cycle <= 1.0) {
            return Err(ConfigError::DutyRange(self.duty_cycle));
        }
        if !(0.0 <= self.mu.vacuum && self.mu.vacuum <= self.mu.decoy && self.mu.decoy <= self.mu.signal)
            || !self.mu.signal.is_finite()
        {
            return Err(ConfigError::MuOrder);
        }
        self.geometry()?;
        Ok(())
    }

    /// Blocking window in slots, rounded up.
    pub fn blocking_slots(&self) -> u64 {
        (self.blocking_time_us * 1000.0 / self.slot_width_ns).ceil() as u64
    }

    /// Slot layout derived from rate, slot width, superframe, and duty cycle.
    pub fn geometry(&self) -> Result<SlotGeometry, ConfigError> {
        let slots_per_pulse = (1e9 / (self.pulse_rate_hz * self.slot_width_ns)).round() as u64;
        if slots_per_pulse == 0 {
            return Err(ConfigError::SlotGeometry(
                "pulse period shorter than one slot".into(),
            ));
        }
        let superframe_slots = (self.superframe_us * 1000.0 / self.slot_width_ns).round() as u64;
        if superframe_slots == 0 {
            return Err(ConfigError::SlotGeometry("superframe shorter than one slot".into()));
        }
        let active_slots = ((superframe_slots as f64) * self.duty_cycle).floor() as u64;
        if active_slots == 0 {
            return Err(ConfigError::SlotGeometry(
                "active window shorter than one slot".into(),
            ));
        }
        Ok(SlotGeometry { slots_per_pulse, superframe_slots, active_slots })
    }
}

/// Derived slot layout. Pulse positions are multiples of `slots_per_pulse`
/// whose offset within the superframe falls in `[0, active_slots)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotGeometry {
    pub slots_per_pulse: u64,
    pub superframe_slots: u64,
    pub active_slots: u64,
}

impl SlotGeometry {
    /// Pulse positions per superframe.
    pub fn pulses_per_superframe(&self) -> u64 {
        self.active_slots.div_ceil(self.slots_per_pulse)
    }

    /// Absolute slot of the `idx`-th active pulse position.
    pub fn pulse_slot(&self, idx: u64) -> u64 {
        let ppsf = self.pulses_per_superframe();
        (idx / ppsf) * self.superframe_slots + (idx % ppsf) * self.slots_per_pulse
    }

    /// Whether `slot` lies in the duty-cycle-active window.
    pub fn is_active(&self, slot: u64) -> bool {
        slot % self.superframe_slots < self.active_slots
    }

    /// Absolute slot of the `idx`-th active slot (for the dark-count
    /// process, which runs over every active slot, pulse-bearing or not).
    fn active_slot(&self, idx: u64) -> u64 {
        (idx / self.active_slots) * self.superframe_slots + (idx % self.active_slots)
    }

    /// Number of active slots in `[0, end]`.
    pub fn active_slots_through(&self, end: u64) -> u64 {
        let full = end / self.superframe_slots;
        let rem = end % self.superframe_slots;
        full * self.active_slots + (rem + 1).min(self.active_slots)
    }
}

/// One emitted pulse: the sender-side truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransmitRecord {
    pub slot: u64,
    pub basis: Basis,
    pub bit: bool,
    pub decoy_level: DecoyLevel,
    /// Mean photon number; always `cfg.mu.mu(decoy_level)`.
    pub mean_photons: f64,
}

/// Cause tag on a detection. Ground truth for test oracles only; protocol
/// code must never branch on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClickCause {
    Photon,
    Dark,
}

/// One recorded click after double-click resolution and blocking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub slot: u64,
    pub detector: Detector,
    pub cause: ClickCause,
}

/// Overall single-photon transmission probability: fiber loss times
/// detector efficiency.
pub fn link_transmittance(cfg: &ChannelConfig) -> f64 {
    10f64.powf(-cfg.attenuation_db_per_km * cfg.fiber_length_km / 10.0) * cfg.detector_efficiency
}

/// Slot schedule for one client: the subsequence of active pulse positions
/// `offset, offset + stride, offset + 2·stride, …` (indices over active
/// pulse positions, not raw slots). `IDENTITY` uses every position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PulsePattern {
    pub offset: u64,
    pub stride: u64,
}

impl PulsePattern {
    pub const IDENTITY: PulsePattern = PulsePattern { offset: 0, stride: 1 };
}

/// Draws `n_pulses` BB84 pulses with uniform basis/bit and weighted decoy
/// levels, on the active pulse positions selected by `IDENTITY`.
pub fn transmit(
    cfg: &ChannelConfig,
    n_pulses: u64,
    decoy_weights: [f64; 3],
    seed: [u8; 32],
) -> Result<Vec<TransmitRecord>, ConfigError> {
    transmit_scheduled(cfg, n_pulses, decoy_weights, seed, PulsePattern::IDENTITY)
}

/// [`transmit`] on an explicit pulse pattern; the orchestrator interleaves
/// clients by giving client `c` of `N` the pattern `(c, N)`.
pub fn transmit_scheduled(
    cfg: &ChannelConfig,
    n_pulses: u64,
    decoy_weights: [f64; 3],
    seed: [u8; 32],
    pattern: PulsePattern,
) -> Result<Vec<TransmitRecord>, ConfigError> {
    cfg.validate()?;
    if n_pulses == 0 {
        return Err(ConfigError::NoPulses);
    }
    let sum: f64 = decoy_weights.iter().sum();
    if decoy_weights.iter().any(|w| *w < 0.0 || !w.is_finite()) || (sum - 1.0).abs() > 1e-9 {
        return Err(ConfigError::WeightSum(sum));
    }
    assert!(pattern.stride >= 1, "pattern stride must be at least 1");
    let geom = cfg.geometry()?;
    let mut rng = rng::stream(&seed, &[b"transmit"]);
    let cum = [
        decoy_weights[0],
        decoy_weights[0] + decoy_weights[1],
    ];
    let mut out = Vec::with_capacity(n_pulses as usize);
    for k in 0..n_pulses {
        let slot = geom.pulse_slot(pattern.offset + k * pattern.stride);
        let basis = if rng.random_bool(0.5) { Basis::Rectilinear } else { Basis::Diagonal };
        let bit = rng.random_bool(0.5);
        let u: f64 = rng.random();
        let decoy_level = if u < cum[0] {
            DecoyLevel::Vacuum
        } else if u < cum[1] {
            DecoyLevel::Decoy
        } else {
            DecoyLevel::Signal
        };
        out.push(TransmitRecord {
            slot,
            basis,
            bit,
            decoy_level,
            mean_photons: cfg.mu.mu(decoy_level),
        });
    }
    Ok(out)
}

/// Per-detector dark-count processes over active slots, sampled by
/// geometric gaps (exactly equivalent to per-slot Bernoulli draws).
struct DarkStreams {
    /// Next candidate absolute slot per detector; `u64::MAX` = exhausted.
    next: [u64; 4],
    /// Active-slot index per detector.
    idx: [u64; 4],
    rngs: Vec<DetRng>,
    log1m_p: f64,
    geom: SlotGeometry,
    last_slot: u64,
}

impl DarkStreams {
    fn new(cfg: &ChannelConfig, geom: SlotGeometry, seed: &[u8; 32], last_slot: u64) -> Self {
        let mut s = DarkStreams {
            next: [u64::MAX; 4],
            idx: [0; 4],
            rngs: (0..4)
                .map(|d| rng::stream(seed, &[b"dark", &[d as u8]]))
                .collect(),
            log1m_p: (-cfg.dark_prob).ln_1p(),
            geom,
            last_slot,
        };
        if cfg.dark_prob > 0.0 {
            for d in 0..4 {
                s.idx[d] = s.gap(d) - 1;
                s.next[d] = s.place(d);
            }
        }
        s
    }

    /// Geometric gap (≥ 1 slots) to the next dark count.
    fn gap(&mut self, d: usize) -> u64 {
        let u: f64 = self.rngs[d].random();
        if self.log1m_p == 0.0 {
            return u64::MAX;
        }
        let g = ((1.0 - u).ln() / self.log1m_p).floor();
        if g >= u64::MAX as f64 { u64::MAX } else { 1 + g as u64 }
    }

    fn place(&self, d: usize) -> u64 {
        let slot = self.geom.active_slot(self.idx[d]);
        if slot > self.last_slot { u64::MAX } else { slot }
    }

    fn advance(&mut self, d: usize) {
        let g = self.gap(d);
        self.idx[d] = self.idx[d].saturating_add(g);
        self.next[d] = if self.idx[d] == u64::MAX { u64::MAX } else { self.place(d) };
    }

    fn min_slot(&self) -> u64 {
        *self.next.iter().min().unwrap()
    }

    /// Mask of detectors with a dark count due exactly at `slot`; advances
    /// those streams.
    fn take_at(&mut self, slot: u64) -> u8 {
        let mut mask = 0u8;
        for d in 0..4 {
            if self.next[d] == slot {
                mask |= 1 << d;
                self.advance(d);
            }
        }
        mask
    }
}

/// Propagates pulses through the lossy link and simulates the receiver:
/// Poisson photon statistics, passive basis choice per photon, intrinsic
/// polarization flips, dark counts in every active slot, after-pulse
/// blocking, and double-click resolution.
pub fn propagate_detect(
    tx: &[TransmitRecord],
    cfg: &ChannelConfig,
    seed: [u8; 32],
) -> Result<Vec<DetectionRecord>, ConfigError> {
    cfg.validate()?;
    let geom = cfg.geometry()?;
    let t = link_transmittance(cfg);
    let blocking = cfg.blocking_slots();
    let last_slot = match tx.last() {
        Some(r) => r.slot,
        None => return Ok(Vec::new()),
    };
    debug_assert!(tx.windows(2).all(|w| w[0].slot < w[1].slot), "tx must be slot-ordered");

    let mut rng = rng::stream(&seed, &[b"detect"]);
    let mut darks = DarkStreams::new(cfg, geom, &seed, last_slot);
    // Poisson samplers per distinct mean (at most three).
    let mut poissons: Vec<(f64, Option<Poisson<f64>>)> = Vec::new();
    let sampler = |mu: f64, rng: &mut DetRng, poissons: &mut Vec<(f64, Option<Poisson<f64>>)>| -> u64 {
        let lambda = mu * t;
        let entry = poissons.iter().find(|(l, _)| *l == lambda);
        let dist = match entry {
            Some((_, d)) => *d,
            None => {
                let d = if lambda > 0.0 { Some(Poisson::new(lambda).expect("positive finite lambda")) } else { None };
                poissons.push((lambda, d));
                d
            }
        };
        match dist {
            Some(d) => d.sample(rng) as u64,
            None => 0,
        }
    };

    let mut out = Vec::new();
    // Slots at or before `blocked_until` are inside a blocking window.
    let mut blocked_until: u64 = 0;
    let mut blocked_armed = false;

    let process = |slot: u64,
                       pulse: Option<&TransmitRecord>,
                       dark_mask: u8,
                       rng: &mut DetRng,
                       poissons: &mut Vec<(f64, Option<Poisson<f64>>)>,
                       blocked_until: &mut u64,
                       blocked_armed: &mut bool,
                       out: &mut Vec<DetectionRecord>| {
        let blocked = *blocked_armed && slot <= *blocked_until;
        if blocked {
            return;
        }
        let mut mask = dark_mask;
        let mut photon_mask = 0u8;
        if let Some(rec) = pulse {
            let n = sampler(rec.mean_photons, rng, poissons);
            for _ in 0..n {
                let rx_basis = if rng.random_bool(0.5) { Basis::Rectilinear } else { Basis::Diagonal };
                let outcome = if rx_basis == rec.basis {
                    rec.bit ^ rng.random_bool(cfg.intrinsic_error)
                } else {
                    rng.random_bool(0.5)
                };
                let det = Detector::from_outcome(rx_basis, outcome);
                photon_mask |= det.mask();
            }
            mask |= photon_mask;
        }
        if mask == 0 {
            return;
        }
        // Any click (even one later discarded by policy) deadens the
        // detectors for the blocking window.
        *blocked_until = slot + blocking;
        *blocked_armed = blocking > 0;
        match mask.count_ones() {
            1 => {
                let d = Detector::from_index(mask.trailing_zeros() as usize);
                let cause = if photon_mask & mask != 0 { ClickCause::Photon } else { ClickCause::Dark };
                out.push(DetectionRecord { slot, detector: d, cause });
            }
            _ => match cfg.double_click {
                DoubleClickPolicy::StrictDiscard => {}
                DoubleClickPolicy::RandomAssign => {
                    let rect = mask & 0b0011 != 0;
                    let diag = mask & 0b1100 != 0;
                    let basis = match (rect, diag) {
                        (true, false) => Basis::Rectilinear,
                        (false, true) => Basis::Diagonal,
                        _ => {
                            if rng.random_bool(0.5) { Basis::Rectilinear } else { Basis::Diagonal }
                        }
                    };
                    let det = Detector::from_outcome(basis, rng.random_bool(0.5));
                    let cause = if photon_mask != 0 { ClickCause::Photon } else { ClickCause::Dark };
                    out.push(DetectionRecord { slot, detector: det, cause });
                }
            },
        }
    };

    for rec in tx {
        // Dark-only slots strictly before this pulse.
        loop {
            let s = darks.min_slot();
            if s >= rec.slot {
                break;
            }
            let mask = darks.take_at(s);
            process(s, None, mask, &mut rng, &mut poissons, &mut blocked_until, &mut blocked_armed, &mut out);
        }
        let dark_mask = darks.take_at(rec.slot);
        process(rec.slot, Some(rec), dark_mask, &mut rng, &mut poissons, &mut blocked_until, &mut blocked_armed, &mut out);
    }
    Ok(out)
}
