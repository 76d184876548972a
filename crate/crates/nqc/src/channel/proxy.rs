//! Bump-in-the-wire proxy: reads measurement frames on one stream and
//! writes their secured form on another (or the reverse), inserting
//! itself into an existing link without touching either endpoint.
//!
//! The engine is generic over `Read`/`Write` so tests can drive it with
//! in-memory buffers; [`proxy_serve`] wraps it around a TCP socket pair.
//! It fails closed: when keys run out, plaintext is held in a bounded
//! buffer and then dropped with an alarm, never forwarded unprotected.

use super::{
    ChannelCounters, ChannelError, KeyFeed, Opener, Sealer, SecuredFrame, FRAME_HEADER_LEN,
    FRAME_MAGIC, FRAME_VERSION, TAG_LEN,
};
use super::pmu::PMU_SYNC;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::{ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyMode {
    /// Plaintext measurement frames in, secured frames out.
    Seal,
    /// Secured frames in, plaintext measurement frames out.
    Open,
}

#[derive(Clone, Copy, Debug)]
pub struct ProxyOptions {
    pub mode: ProxyMode,
    pub direction_id: u32,
    /// Frames sealed per epoch before rotating keys.
    pub rekey_threshold: u64,
    /// Plaintext frames held while waiting for keys before drops start.
    pub hold_limit: usize,
    /// Emit a cumulative latency snapshot every this many forwarded
    /// frames.
    pub report_every: Option<usize>,
}

impl ProxyOptions {
    pub fn new(mode: ProxyMode, direction_id: u32) -> ProxyOptions {
        ProxyOptions {
            mode,
            direction_id,
            rekey_threshold: super::DEFAULT_REKEY_THRESHOLD,
            hold_limit: 64,
            report_every: None,
        }
    }
}

/// Timing record for one forwarded frame. Times are nanoseconds on the
/// proxy's monotonic clock, measured from proxy start; `added_us` is the
/// frame's dwell inside the proxy (egress minus ingress), which is the
/// latency this hop adds to the path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub frame_idx: u64,
    pub ingress_ns: u64,
    pub egress_ns: u64,
    pub added_us: f64,
}

/// Added-latency summary over the frames forwarded so far.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub count: usize,
    pub p50_us: f64,
    pub p95_us: f64,
    pub p99_us: f64,
}

impl LatencyReport {
    /// Nearest-rank percentiles over the samples' added latency.
    pub fn from_samples(samples: &[LatencySample]) -> LatencyReport {
        let mut sorted: Vec<f64> = samples.iter().map(|s| s.added_us).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("latency values are finite"));
        let rank = |p: f64| -> f64 {
            if sorted.is_empty() {
                return 0.0;
            }
            let r = (p / 100.0 * sorted.len() as f64).ceil() as usize;
            sorted[r.clamp(1, sorted.len()) - 1]
        };
        LatencyReport {
            count: sorted.len(),
            p50_us: rank(50.0),
            p95_us: rank(95.0),
            p99_us: rank(99.0),
        }
    }
}

/// Everything a proxy run produced: totals, per-frame timing, the final
/// summary, and any periodic snapshots.
#[derive(Clone, Debug)]
pub struct ProxyOutcome {
    pub counters: ChannelCounters,
    pub samples: Vec<LatencySample>,
    pub report: LatencyReport,
    pub periodic: Vec<LatencyReport>,
}

/// Writes per-frame timing as CSV with a header row.
pub fn write_metrics_csv(path: &Path, samples: &[LatencySample]) -> std::io::Result<()> {
    let mut out = String::from("frame_idx,ingress_ns,egress_ns,added_us\n");
    for s in samples {
        out.push_str(&format!(
            "{},{},{},{:.3}\n",
            s.frame_idx, s.ingress_ns, s.egress_ns, s.added_us
        ));
    }
    std::fs::write(path, out)
}

/// Reads exactly `buf.len()` bytes. `Ok(false)` means the stream ended
/// cleanly before the first byte; ending mid-buffer is an error.
fn read_exact_or_eof<R: Read>(
    reader: &mut R,
    buf: &mut [u8],
    what: &'static str,
) -> Result<bool, ChannelError> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => {
                if filled == 0 {
                    return Ok(false);
                }
                return Err(ChannelError::Truncated { offset: filled as u64, what });
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

fn read_rest<R: Read>(
    reader: &mut R,
    buf: &mut [u8],
    already: usize,
    what: &'static str,
) -> Result<(), ChannelError> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(ChannelError::Truncated {
                    offset: (already + filled) as u64,
                    what,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

struct HeldFrame {
    bytes: Vec<u8>,
    frame_idx: u64,
    ingress_ns: u64,
}

/// Runs one direction of the proxy until the ingress stream ends,
/// returning totals and timing. See [`ProxyOptions`] for behavior knobs.
pub fn proxy_run<R: Read, W: Write, F: KeyFeed>(
    mut ingress: R,
    mut egress: W,
    feed: F,
    opts: &ProxyOptions,
) -> Result<ProxyOutcome, ChannelError> {
    match opts.mode {
        ProxyMode::Seal => run_seal(&mut ingress, &mut egress, feed, opts),
        ProxyMode::Open => run_open(&mut ingress, &mut egress, feed, opts),
    }
}

fn run_seal<R: Read, W: Write, F: KeyFeed>(
    ingress: &mut R,
    egress: &mut W,
    feed: F,
    opts: &ProxyOptions,
) -> Result<ProxyOutcome, ChannelError> {
    let clock = Instant::now();
    let mut sealer = Sealer::new(opts.direction_id, feed, opts.rekey_threshold)?;
    let mut held: VecDeque<HeldFrame> = VecDeque::new();
    let mut exhaustion_drops = 0u64;
    let mut samples = Vec::new();
    let mut periodic = Vec::new();
    let mut frame_idx = 0u64;

    loop {
        let mut header = [0u8; 13];
        if !read_exact_or_eof(ingress, &mut header, "measurement header")? {
            break;
        }
        let sync = u16::from_be_bytes([header[0], header[1]]);
        if sync != PMU_SYNC {
            return Err(ChannelError::BadSync { got: sync, expected: PMU_SYNC });
        }
        let count = header[12] as usize;
        let mut rest = vec![0u8; count * 8 + 6];
        read_rest(ingress, &mut rest, header.len(), "measurement body")?;
        let mut frame_bytes = header.to_vec();
        frame_bytes.extend_from_slice(&rest);
        let ingress_ns = clock.elapsed().as_nanos() as u64;
        let idx = frame_idx;
        frame_idx += 1;

        // Older frames waiting on keys go first so order is preserved.
        drain_held(&mut sealer, &mut held, egress, &clock, &mut samples)?;
        if held.is_empty() {
            match sealer.seal(&frame_bytes) {
                Ok(frame) => {
                    forward_sealed(egress, &frame, idx, ingress_ns, &clock, &mut samples)?;
                }
                Err(ChannelError::KeyExhaustion { .. }) => {
                    held.push_back(HeldFrame { bytes: frame_bytes, frame_idx: idx, ingress_ns });
                }
                Err(e) => return Err(e),
            }
        } else if held.len() < opts.hold_limit {
            held.push_back(HeldFrame { bytes: frame_bytes, frame_idx: idx, ingress_ns });
        } else {
            exhaustion_drops += 1;
        }
        push_periodic(opts, &samples, &mut periodic);
    }
    // Final key check, then anything still unprotected is dropped.
    drain_held(&mut sealer, &mut held, egress, &clock, &mut samples)?;
    exhaustion_drops += held.len() as u64;
    egress.flush()?;

    let mut counters = sealer.counters;
    counters.exhaustion_drops = exhaustion_drops;
    Ok(ProxyOutcome { counters, report: LatencyReport::from_samples(&samples), samples, periodic })
}

fn drain_held<W: Write, F: KeyFeed>(
    sealer: &mut Sealer<F>,
    held: &mut VecDeque<HeldFrame>,
    egress: &mut W,
    clock: &Instant,
    samples: &mut Vec<LatencySample>,
) -> Result<(), ChannelError> {
    while let Some(front) = held.front() {
        match sealer.seal(&front.bytes) {
            Ok(frame) => {
                let (idx, ingress_ns) = (front.frame_idx, front.ingress_ns);
                held.pop_front();
                forward_sealed(egress, &frame, idx, ingress_ns, clock, samples)?;
            }
            Err(ChannelError::KeyExhaustion { .. }) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn forward_sealed<W: Write>(
    egress: &mut W,
    frame: &SecuredFrame,
    frame_idx: u64,
    ingress_ns: u64,
    clock: &Instant,
    samples: &mut Vec<LatencySample>,
) -> Result<(), ChannelError> {
    egress.write_all(&frame.encode())?;
    egress.flush()?;
    let egress_ns = clock.elapsed().as_nanos() as u64;
    samples.push(LatencySample {
        frame_idx,
        ingress_ns,
        egress_ns,
        added_us: (egress_ns - ingress_ns) as f64 / 1000.0,
    });
    Ok(())
}

fn run_open<R: Read, W: Write, F: KeyFeed>(
    ingress: &mut R,
    egress: &mut W,
    feed: F,
    opts: &ProxyOptions,
) -> Result<ProxyOutcome, ChannelError> {
    let clock = Instant::now();
    let mut opener = Opener::new(opts.direction_id, feed)?;
    let mut exhaustion_drops = 0u64;
    let mut misrouted = 0u64;
    let mut samples = Vec::new();
    let mut periodic = Vec::new();
    let mut frame_idx = 0u64;

    loop {
        let mut header = [0u8; FRAME_HEADER_LEN];
        if !read_exact_or_eof(ingress, &mut header, "frame header")? {
            break;
        }
        let magic = u16::from_be_bytes([header[0], header[1]]);
        if magic != FRAME_MAGIC {
            return Err(ChannelError::BadSync { got: magic, expected: FRAME_MAGIC });
        }
        if header[2] != FRAME_VERSION {
            return Err(ChannelError::Version(header[2]));
        }
        let len = u32::from_be_bytes(header[23..27].try_into().unwrap()) as usize;
        let mut body = vec![0u8; len + TAG_LEN];
        read_rest(ingress, &mut body, header.len(), "frame body")?;
        let mut whole = header.to_vec();
        whole.extend_from_slice(&body);
        let (frame, _) = SecuredFrame::decode(&whole)?;
        let ingress_ns = clock.elapsed().as_nanos() as u64;
        let idx = frame_idx;
        frame_idx += 1;

        match opener.open(&frame) {
            Ok(plaintext) => {
                egress.write_all(&plaintext)?;
                egress.flush()?;
                let egress_ns = clock.elapsed().as_nanos() as u64;
                samples.push(LatencySample {
                    frame_idx: idx,
                    ingress_ns,
                    egress_ns,
                    added_us: (egress_ns - ingress_ns) as f64 / 1000.0,
                });
            }
            // Bad or replayed frames are dropped and counted by the
            // opener; the stream keeps flowing.
            Err(ChannelError::TagMismatch)
            | Err(ChannelError::SequenceRegression { .. })
            | Err(ChannelError::EpochRegression { .. }) => {}
            Err(ChannelError::KeyExhaustion { .. }) => exhaustion_drops += 1,
            Err(ChannelError::DirectionMismatch { .. }) => misrouted += 1,
            Err(e) => return Err(e),
        }
        push_periodic(opts, &samples, &mut periodic);
    }
    egress.flush()?;

    let mut counters = opener.counters;
    counters.exhaustion_drops = exhaustion_drops;
    counters.misrouted = misrouted;
    Ok(ProxyOutcome { counters, report: LatencyReport::from_samples(&samples), samples, periodic })
}

fn push_periodic(opts: &ProxyOptions, samples: &[LatencySample], periodic: &mut Vec<LatencyReport>) {
    if let Some(every) = opts.report_every {
        if every > 0 && !samples.is_empty() && samples.len() % every == 0 {
            periodic.push(LatencyReport::from_samples(samples));
        }
    }
}

/// Accepts one ingress connection on `listener`, connects onward to
/// `forward`, and proxies until the ingress side closes.
pub fn proxy_serve<F: KeyFeed>(
    listener: TcpListener,
    forward: &str,
    feed: F,
    opts: &ProxyOptions,
) -> Result<ProxyOutcome, ChannelError> {
    let (ingress, _) = listener.accept()?;
    ingress.set_nodelay(true)?;
    let egress = connect_retry(forward)?;
    egress.set_nodelay(true)?;
    proxy_run(std::io::BufReader::new(ingress), egress, feed, opts)
}

fn connect_retry(addr: &str) -> std::io::Result<TcpStream> {
    for _ in 0..40 {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(_) => std::thread::sleep(std::time::Duration::from_millis(50)),
        }
    }
    TcpStream::connect(addr)
}
