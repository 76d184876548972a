//! Trace files: raw transmit and detection records captured during a
//! network run, so post-processing can be replayed offline without
//! rerunning the optical simulation.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"NQCT"
//! version u16 = 1
//! repeated sessions:
//!   client_id u32, epoch u64, tx_count u64, det_count u64
//!   tx_count transmit records, 19 bytes each:
//!     slot u64, basis u8, bit u8, decoy u8, mean_photons f64
//!   det_count detection records, 10 bytes each:
//!     slot u64, detector u8, cause u8
//! ```
//!
//! Enum codes: basis rectilinear=0 diagonal=1; decoy vacuum=0 decoy=1
//! signal=2; detector H=0 V=1 D=2 A=3; cause photon=0 dark=1.

use super::OrchestratorError;
use crate::photonic::{Basis, ClickCause, DecoyLevel, DetectionRecord, Detector, TransmitRecord};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const TRACE_MAGIC: [u8; 4] = *b"NQCT";
const TRACE_VERSION: u16 = 1;
const TX_RECORD_LEN: usize = 19;
const DET_RECORD_LEN: usize = 10;

/// One client-epoch's records, as stored in a trace file.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSession {
    pub client_id: u32,
    pub epoch: u64,
    pub tx: Vec<TransmitRecord>,
    pub det: Vec<DetectionRecord>,
}

/// Incremental trace writer; sessions are appended as they complete.
pub struct TraceWriter {
    out: BufWriter<File>,
}

impl TraceWriter {
    pub fn create(path: &Path) -> Result<TraceWriter, OrchestratorError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&TRACE_MAGIC)?;
        out.write_all(&TRACE_VERSION.to_le_bytes())?;
        Ok(TraceWriter { out })
    }

    pub fn append(
        &mut self,
        client_id: u32,
        epoch: u64,
        tx: &[TransmitRecord],
        det: &[DetectionRecord],
    ) -> Result<(), OrchestratorError> {
        self.out.write_all(&client_id.to_le_bytes())?;
        self.out.write_all(&epoch.to_le_bytes())?;
        self.out.write_all(&(tx.len() as u64).to_le_bytes())?;
        self.out.write_all(&(det.len() as u64).to_le_bytes())?;
        for t in tx {
            self.out.write_all(&t.slot.to_le_bytes())?;
            self.out.write_all(&[basis_code(t.basis), t.bit as u8, decoy_code(t.decoy_level)])?;
            self.out.write_all(&t.mean_photons.to_le_bytes())?;
        }
        for d in det {
            self.out.write_all(&d.slot.to_le_bytes())?;
            self.out.write_all(&[detector_code(d.detector), cause_code(d.cause)])?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), OrchestratorError> {
        self.out.flush()?;
        Ok(())
    }
}

/// Writes every session to a fresh trace file.
pub fn write_trace(path: &Path, sessions: &[TraceSession]) -> Result<(), OrchestratorError> {
    let mut w = TraceWriter::create(path)?;
    for s in sessions {
        w.append(s.client_id, s.epoch, &s.tx, &s.det)?;
    }
    w.finish()
}

fn basis_code(b: Basis) -> u8 {
    match b {
        Basis::Rectilinear => 0,
        Basis::Diagonal => 1,
    }
}

fn decoy_code(d: DecoyLevel) -> u8 {
    d.index() as u8
}

fn detector_code(d: Detector) -> u8 {
    match d {
        Detector::H => 0,
        Detector::V => 1,
        Detector::D => 2,
        Detector::A => 3,
    }
}

fn cause_code(c: ClickCause) -> u8 {
    match c {
        ClickCause::Photon => 0,
        ClickCause::Dark => 1,
    }
}

struct TraceCursor<R> {
    src: R,
    offset: u64,
}

impl<R: Read> TraceCursor<R> {
    fn fail(&self, what: &str) -> OrchestratorError {
        OrchestratorError::TraceDecode { offset: self.offset, what: what.into() }
    }

    /// Fills `buf` exactly, or reports where the file ran out. A clean
    /// end-of-file at a section boundary returns `Ok(false)`.
    fn read_exact_or_end(&mut self, buf: &mut [u8], what: &str) -> Result<bool, OrchestratorError> {
        let mut filled = 0usize;
        while filled < buf.len() {
            let n = self.src.read(&mut buf[filled..]).map_err(OrchestratorError::Io)?;
            if n == 0 {
                if filled == 0 {
                    return Ok(false);
                }
                return Err(OrchestratorError::TraceDecode {
                    offset: self.offset + filled as u64,
                    what: format!("file ends inside {what}"),
                });
            }
            filled += n;
        }
        self.offset += buf.len() as u64;
        Ok(true)
    }

    fn read_u64(&mut self, what: &str) -> Result<u64, OrchestratorError> {
        let mut b = [0u8; 8];
        if !self.read_exact_or_end(&mut b, what)? {
            return Err(self.fail(&format!("file ends before {what}")));
        }
        Ok(u64::from_le_bytes(b))
    }
}

/// Reads an entire trace file back into per-session record lists.
pub fn read_trace(path: &Path) -> Result<Vec<TraceSession>, OrchestratorError> {
    let mut cur = TraceCursor { src: BufReader::new(File::open(path)?), offset: 0 };
    let mut head = [0u8; 6];
    if !cur.read_exact_or_end(&mut head, "file header")? {
        return Err(cur.fail("file ends before file header"));
    }
    if head[0..4] != TRACE_MAGIC {
        return Err(OrchestratorError::TraceDecode {
            offset: 0,
            what: format!("bad magic {:02x?}", &head[0..4]),
        });
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != TRACE_VERSION {
        return Err(OrchestratorError::TraceDecode {
            offset: 4,
            what: format!("unsupported version {version}"),
        });
    }

    let mut sessions = Vec::new();
    loop {
        let mut id_bytes = [0u8; 4];
        if !cur.read_exact_or_end(&mut id_bytes, "session header")? {
            return Ok(sessions);
        }
        let client_id = u32::from_le_bytes(id_bytes);
        let epoch = cur.read_u64("session epoch")?;
        let tx_count = cur.read_u64("transmit count")?;
        let det_count = cur.read_u64("detection count")?;

        let mut tx = Vec::with_capacity(tx_count.min(1 << 24) as usize);
        let mut rec = [0u8; TX_RECORD_LEN];
        for _ in 0..tx_count {
            if !cur.read_exact_or_end(&mut rec, "transmit record")? {
                return Err(cur.fail("file ends before transmit record"));
            }
            tx.push(decode_tx(&rec, cur.offset - TX_RECORD_LEN as u64)?);
        }
        let mut det = Vec::with_capacity(det_count.min(1 << 24) as usize);
        let mut drec = [0u8; DET_RECORD_LEN];
        for _ in 0..det_count {
            if !cur.read_exact_or_end(&mut drec, "detection record")? {
                return Err(cur.fail("file ends before detection record"));
            }
            det.push(decode_det(&drec, cur.offset - DET_RECORD_LEN as u64)?);
        }
        sessions.push(TraceSession { client_id, epoch, tx, det });
    }
}

fn decode_tx(rec: &[u8; TX_RECORD_LEN], at: u64) -> Result<TransmitRecord, OrchestratorError> {
    let bad = |field: &str, code: u8| OrchestratorError::TraceDecode {
        offset: at,
        what: format!("invalid {field} code {code}"),
    };
    let basis = match rec[8] {
        0 => Basis::Rectilinear,
        1 => Basis::Diagonal,
        c => return Err(bad("basis", c)),
    };
    let bit = match rec[9] {
        0 => false,
        1 => true,
        c => return Err(bad("bit", c)),
    };
    let decoy_level = match rec[10] {
        0 => DecoyLevel::Vacuum,
        1 => DecoyLevel::Decoy,
        2 => DecoyLevel::Signal,
        c => return Err(bad("decoy level", c)),
    };
    Ok(TransmitRecord {
        slot: u64::from_le_bytes(rec[0..8].try_into().expect("8 bytes")),
        basis,
        bit,
        decoy_level,
        mean_photons: f64::from_le_bytes(rec[11..19].try_into().expect("8 bytes")),
    })
}

fn decode_det(rec: &[u8; DET_RECORD_LEN], at: u64) -> Result<DetectionRecord, OrchestratorError> {
    let bad = |field: &str, code: u8| OrchestratorError::TraceDecode {
        offset: at,
        what: format!("invalid {field} code {code}"),
    };
    let detector = match rec[8] {
        0 => Detector::H,
        1 => Detector::V,
        2 => Detector::D,
        3 => Detector::A,
        c => return Err(bad("detector", c)),
    };
    let cause = match rec[9] {
        0 => ClickCause::Photon,
        1 => ClickCause::Dark,
        c => return Err(bad("click cause", c)),
    };
    Ok(DetectionRecord {
        slot: u64::from_le_bytes(rec[0..8].try_into().expect("8 bytes")),
        detector,
        cause,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::photonic::{propagate_detect, transmit_scheduled, ChannelConfig, PulsePattern};
    use crate::rng;

    fn sample_sessions() -> Vec<TraceSession> {
        let cfg = ChannelConfig { fiber_length_km: 25.0, ..ChannelConfig::default() };
        let master = rng::master_seed(11);
        (0..2u32)
            .map(|i| {
                let tx = transmit_scheduled(
                    &cfg,
                    500,
                    [0.02, 0.3, 0.68],
                    rng::child_seed(&master, &[b"tx", &i.to_le_bytes()]),
                    PulsePattern { offset: i as u64, stride: 2 },
                )
                .unwrap();
                let det =
                    propagate_detect(&tx, &cfg, rng::child_seed(&master, &[b"rx", &i.to_le_bytes()]))
                        .unwrap();
                TraceSession { client_id: i + 1, epoch: 3, tx, det }
            })
            .collect()
    }

    #[test]
    fn test_trace_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.nqct");
        let sessions = sample_sessions();
        write_trace(&path, &sessions).unwrap();
        let back = read_trace(&path).unwrap();
        assert_eq!(back, sessions);
    }

    #[test]
    fn test_empty_trace_has_no_sessions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.nqct");
        write_trace(&path, &[]).unwrap();
        assert!(read_trace(&path).unwrap().is_empty());
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 6);
    }

    #[test]
    fn test_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.nqct");
        std::fs::write(&path, b"JUNK\x01\x00").unwrap();
        match read_trace(&path) {
            Err(OrchestratorError::TraceDecode { offset: 0, what }) => {
                assert!(what.contains("magic"), "{what}")
            }
            other => panic!("expected magic error, got {other:?}"),
        }
    }

    #[test]
    fn test_truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.nqct");
        let sessions = sample_sessions();
        write_trace(&path, &sessions).unwrap();
        let full = std::fs::read(&path).unwrap();
        // Cut inside the first session's transmit records.
        let cut = 6 + 28 + TX_RECORD_LEN + 7;
        std::fs::write(&path, &full[..cut]).unwrap();
        match read_trace(&path) {
            Err(OrchestratorError::TraceDecode { offset, what }) => {
                assert_eq!(offset, cut as u64, "{what}");
                assert!(what.contains("transmit record"), "{what}");
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn test_invalid_enum_code_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("code.nqct");
        write_trace(&path, &sample_sessions()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let basis_at = 6 + 28 + 8;
        bytes[basis_at] = 9;
        std::fs::write(&path, &bytes).unwrap();
        match read_trace(&path) {
            Err(OrchestratorError::TraceDecode { offset, what }) => {
                assert_eq!(offset, (6 + 28) as u64);
                assert!(what.contains("basis"), "{what}");
            }
            other => panic!("expected enum-code error, got {other:?}"),
        }
    }

    #[test]
    fn test_version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ver.nqct");
        write_trace(&path, &[]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 2;
        std::fs::write(&path, &bytes).unwrap();
        match read_trace(&path) {
            Err(OrchestratorError::TraceDecode { offset: 4, what }) => {
                assert!(what.contains("version"), "{what}")
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }
}
