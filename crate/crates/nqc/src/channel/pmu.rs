//! Synchrophasor frame codec and a deterministic measurement source.
//!
//! Frames use a compact big-endian layout with a CCITT CRC trailer. The
//! source generates steady-state or fault-injection waveforms on a fixed
//! reporting rate; it is pure, so a given (rate, scenario, count) always
//! yields the same byte stream.

use super::ChannelError;
use crate::primitives::crc16_ccitt;
use serde::{Deserialize, Serialize};

pub const PMU_SYNC: u16 = 0xA501;
/// sync, station, second-of-century, fraction, phasor count.
const FIXED_HEADER_LEN: usize = 2 + 2 + 4 + 4 + 1;
const PHASOR_LEN: usize = 8;
const TRAILER_LEN: usize = 4 + 2;

/// One polar phasor: magnitude in per-unit, angle in radians within
/// (-pi, pi].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phasor {
    pub magnitude: f32,
    pub angle_rad: f32,
}

/// A timestamped measurement frame from one station.
#[derive(Clone, Debug, PartialEq)]
pub struct SynchrophasorFrame {
    pub station_id: u16,
    /// Whole seconds of the timestamp.
    pub soc: u32,
    /// Fractional seconds in units of 2^-32 s.
    pub frac: u32,
    pub phasors: Vec<Phasor>,
    pub freq_dev_hz: f32,
}

impl SynchrophasorFrame {
    pub fn encoded_len(&self) -> usize {
        FIXED_HEADER_LEN + self.phasors.len() * PHASOR_LEN + TRAILER_LEN
    }
}

fn check_finite(value: f32, what: &'static str) -> Result<(), ChannelError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(ChannelError::FieldRange(what))
    }
}

/// Serializes a frame, validating field ranges first. Angles must lie in
/// (-pi, pi]; exactly pi is legal and survives the trip bit for bit.
pub fn encode_pmu(frame: &SynchrophasorFrame) -> Result<Vec<u8>, ChannelError> {
    if frame.phasors.len() > u8::MAX as usize {
        return Err(ChannelError::FieldRange("phasor count exceeds 255"));
    }
    for p in &frame.phasors {
        check_finite(p.magnitude, "phasor magnitude not finite")?;
        if p.magnitude < 0.0 {
            return Err(ChannelError::FieldRange("phasor magnitude negative"));
        }
        check_finite(p.angle_rad, "phasor angle not finite")?;
        if p.angle_rad <= -std::f32::consts::PI || p.angle_rad > std::f32::consts::PI {
            return Err(ChannelError::FieldRange("phasor angle outside (-pi, pi]"));
        }
    }
    check_finite(frame.freq_dev_hz, "frequency deviation not finite")?;
    let mut out = Vec::with_capacity(frame.encoded_len());
    out.extend_from_slice(&PMU_SYNC.to_be_bytes());
    out.extend_from_slice(&frame.station_id.to_be_bytes());
    out.extend_from_slice(&frame.soc.to_be_bytes());
    out.extend_from_slice(&frame.frac.to_be_bytes());
    out.push(frame.phasors.len() as u8);
    for p in &frame.phasors {
        out.extend_from_slice(&p.magnitude.to_bits().to_be_bytes());
        out.extend_from_slice(&p.angle_rad.to_bits().to_be_bytes());
    }
    out.extend_from_slice(&frame.freq_dev_hz.to_bits().to_be_bytes());
    let crc = crc16_ccitt(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

/// Parses one frame from the front of `data`, returning it with the
/// number of bytes consumed. Reports the byte offset reached when the
/// input runs short, and verifies the CRC trailer last.
pub fn decode_pmu(data: &[u8]) -> Result<(SynchrophasorFrame, usize), ChannelError> {
    if data.len() < FIXED_HEADER_LEN {
        return Err(ChannelError::Truncated {
            offset: data.len() as u64,
            what: "measurement header",
        });
    }
    let sync = u16::from_be_bytes([data[0], data[1]]);
    if sync != PMU_SYNC {
        return Err(ChannelError::BadSync { got: sync, expected: PMU_SYNC });
    }
    let station_id = u16::from_be_bytes([data[2], data[3]]);
    let soc = u32::from_be_bytes(data[4..8].try_into().unwrap());
    let frac = u32::from_be_bytes(data[8..12].try_into().unwrap());
    let count = data[12] as usize;
    let total = FIXED_HEADER_LEN + count * PHASOR_LEN + TRAILER_LEN;
    if data.len() < total {
        let what = if data.len() < FIXED_HEADER_LEN + count * PHASOR_LEN {
            "phasor list"
        } else {
            "frame trailer"
        };
        return Err(ChannelError::Truncated { offset: data.len() as u64, what });
    }
    let mut phasors = Vec::with_capacity(count);
    let mut pos = FIXED_HEADER_LEN;
    for _ in 0..count {
        let magnitude =
            f32::from_bits(u32::from_be_bytes(data[pos..pos + 4].try_into().unwrap()));
        let angle_rad =
            f32::from_bits(u32::from_be_bytes(data[pos + 4..pos + 8].try_into().unwrap()));
        phasors.push(Phasor { magnitude, angle_rad });
        pos += PHASOR_LEN;
    }
    let freq_dev_hz = f32::from_bits(u32::from_be_bytes(data[pos..pos + 4].try_into().unwrap()));
    pos += 4;
    let carried = u16::from_be_bytes([data[pos], data[pos + 1]]);
    let computed = crc16_ccitt(&data[..pos]);
    if carried != computed {
        return Err(ChannelError::BadCrc { computed, carried });
    }
    Ok((SynchrophasorFrame { station_id, soc, frac, phasors, freq_dev_hz }, total))
}

/// Waveform selection for [`pmu_source`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    /// Constant magnitudes, phasors rotating at the base frequency
    /// deviation.
    Steady,
    /// Steady until `at_seconds`, then magnitudes scale by
    /// `magnitude_factor` and the frequency deviation steps by
    /// `freq_step_hz`.
    Fault { at_seconds: f64, magnitude_factor: f32, freq_step_hz: f32 },
}

const BASE_MAGNITUDE: f32 = 1.0;
const BASE_FREQ_DEV_HZ: f64 = 0.02;
const PHASE_OFFSETS: [f64; 3] = [
    0.0,
    -2.0 * std::f64::consts::PI / 3.0,
    2.0 * std::f64::consts::PI / 3.0,
];

fn wrap_angle(x: f64) -> f32 {
    let mut w = x.rem_euclid(std::f64::consts::TAU);
    if w > std::f64::consts::PI {
        w -= std::f64::consts::TAU;
    }
    let a = w as f32;
    // The half-open convention treats -pi and pi as the same angle;
    // rounding into f32 may land on the excluded endpoint.
    if a == -std::f32::consts::PI {
        std::f32::consts::PI
    } else {
        a
    }
}

/// Generates `count` three-phase measurement frames at `rate` frames per
/// second. Frame i is stamped t = i / rate, split into whole seconds and
/// 2^-32 s fractions.
pub fn pmu_source(
    rate: u32,
    scenario: &Scenario,
    count: usize,
    station_id: u16,
) -> Vec<SynchrophasorFrame> {
    assert!(rate > 0, "reporting rate must be positive");
    let mut frames = Vec::with_capacity(count);
    for i in 0..count {
        let t = i as f64 / rate as f64;
        let mut soc = t.floor() as u32;
        let mut frac_wide = ((t - t.floor()) * 4_294_967_296.0).round() as u64;
        if frac_wide >= 1 << 32 {
            soc += 1;
            frac_wide = 0;
        }
        let (magnitude, freq_dev, phase) = match scenario {
            Scenario::Steady => {
                (BASE_MAGNITUDE, BASE_FREQ_DEV_HZ, std::f64::consts::TAU * BASE_FREQ_DEV_HZ * t)
            }
            Scenario::Fault { at_seconds, magnitude_factor, freq_step_hz } => {
                if t < *at_seconds {
                    (
                        BASE_MAGNITUDE,
                        BASE_FREQ_DEV_HZ,
                        std::f64::consts::TAU * BASE_FREQ_DEV_HZ * t,
                    )
                } else {
                    let post_freq = BASE_FREQ_DEV_HZ + *freq_step_hz as f64;
                    // Phase stays continuous through the step.
                    let phase = std::f64::consts::TAU
                        * (BASE_FREQ_DEV_HZ * at_seconds + post_freq * (t - at_seconds));
                    (BASE_MAGNITUDE * magnitude_factor, post_freq, phase)
                }
            }
        };
        let phasors = PHASE_OFFSETS
            .iter()
            .map(|offset| Phasor { magnitude, angle_rad: wrap_angle(offset + phase) })
            .collect();
        frames.push(SynchrophasorFrame {
            station_id,
            soc,
            frac: frac_wide as u32,
            phasors,
            freq_dev_hz: freq_dev as f32,
        });
    }
    frames
}
