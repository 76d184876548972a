//! Basis sifting, seeded shuffling, and sacrificial QBER estimation.

use super::{DecoyStats, PostprocError, SiftedBlock};
use crate::photonic::{ChannelConfig, DetectionRecord, TransmitRecord};
use crate::rng;
use rand::RngExt;

/// Joins transmit and detection records by slot and keeps the positions
/// where the announced bases match. The hub bit comes from which detector
/// fired; the client bit and decoy level come from the sender's record.
/// Dark counts in slots that carried no pulse find no partner and drop out
/// here (no basis was announced for them).
pub fn sift(
    tx: &[TransmitRecord],
    det: &[DetectionRecord],
    cfg: &ChannelConfig,
    session_id: impl Into<String>,
) -> SiftedBlock {
    let mut block = SiftedBlock::empty(session_id);
    if let Ok(geom) = cfg.geometry() {
        debug_assert!(det.iter().all(|d| geom.is_active(d.slot)));
    }
    let mut ti = 0usize;
    for d in det {
        while ti < tx.len() && tx[ti].slot < d.slot {
            ti += 1;
        }
        if ti == tx.len() {
            break;
        }
        let t = &tx[ti];
        if t.slot != d.slot || t.basis != d.detector.basis() {
            continue;
        }
        block.client_bits.push(t.bit);
        block.hub_bits.push(d.detector.bit());
        block.slot_map.push(d.slot);
        block.decoy_levels.push(t.decoy_level);
    }
    debug_assert!(block.check_aligned());
    block
}

fn permutation(n: usize, seed: &[u8; 32], label: &[u8]) -> Vec<usize> {
    let mut rng = rng::stream(seed, &[label]);
    let mut perm: Vec<usize> = (0..n).collect();
    // Fisher-Yates, high to low.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

fn apply_perm(block: &SiftedBlock, perm: &[usize]) -> SiftedBlock {
    let mut out = SiftedBlock::empty(block.session_id.clone());
    out.slot_map.reserve(perm.len());
    for &src in perm {
        out.client_bits.push(block.client_bits.get(src));
        out.hub_bits.push(block.hub_bits.get(src));
        out.slot_map.push(block.slot_map[src]);
        out.decoy_levels.push(block.decoy_levels[src]);
    }
    out
}

/// Applies one seeded uniform permutation to every column of the block.
/// Both parties derive the same permutation from the shared seed, so bit
/// alignment is preserved.
pub fn shuffle(block: &SiftedBlock, seed: [u8; 32]) -> SiftedBlock {
    let perm = permutation(block.len(), &seed, b"shuffle");
    apply_perm(block, &perm)
}

/// Inverse of [`shuffle`] under the same seed.
pub fn unshuffle(block: &SiftedBlock, seed: [u8; 32]) -> SiftedBlock {
    let perm = permutation(block.len(), &seed, b"shuffle");
    let mut inverse = vec![0usize; perm.len()];
    for (dst, &src) in perm.iter().enumerate() {
        inverse[src] = dst;
    }
    apply_perm(block, &inverse)
}

/// Discloses and removes a seeded random sample of the block, returning
/// the observed error fraction and the unsampled remainder. The `sample
/// size` bits of disclosure must be added to the session's leakage ledger
/// by the caller.
pub fn estimate_qber(
    block: &SiftedBlock,
    sample_fraction: f64,
    seed: [u8; 32],
) -> Result<(f64, SiftedBlock), PostprocError> {
    if !(sample_fraction > 0.0 && sample_fraction < 1.0) {
        return Err(PostprocError::SampleFraction(sample_fraction));
    }
    let k = (block.len() as f64 * sample_fraction).floor() as usize;
    if k == 0 {
        return Err(PostprocError::EmptySample {
            block_len: block.len(),
            fraction: sample_fraction,
        });
    }
    let mut idx = permutation(block.len(), &seed, b"qber-sample");
    idx.truncate(k);
    idx.sort_unstable();
    let (sample, remaining) = block.take_indices(&idx);
    let qber = sample.error_count() as f64 / k as f64;
    Ok((qber, remaining))
}

/// Tallies per-level decoy statistics: how many pulses each level sent,
/// how many survived sifting, and how many of those disagree. Gains and
/// error rates derived from these counts are in the sifted convention
/// (the uniform basis-match factor cancels wherever the bounds take
/// ratios). Mean photon numbers are read off the transmit records.
pub fn collect_decoy_stats(tx: &[TransmitRecord], block: &SiftedBlock) -> DecoyStats {
    let mut stats = DecoyStats::default();
    for t in tx {
        let i = t.decoy_level.index();
        stats.sent[i] += 1;
        stats.mu[i] = t.mean_photons;
    }
    for pos in 0..block.len() {
        let i = block.decoy_levels[pos].index();
        stats.clicked[i] += 1;
        if block.client_bits.get(pos) != block.hub_bits.get(pos) {
            stats.errors[i] += 1;
        }
    }
    debug_assert!(stats.check_consistent());
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bits::BitString;
    use crate::photonic::{
        propagate_detect, transmit, Basis, ChannelConfig, ClickCause, DecoyLevel, Detector,
        MuTable,
    };

    fn pulse(slot: u64, basis: Basis, bit: bool) -> TransmitRecord {
        TransmitRecord {
            slot,
            basis,
            bit,
            decoy_level: DecoyLevel::Signal,
            mean_photons: 0.5,
        }
    }

    fn click(slot: u64, detector: Detector) -> DetectionRecord {
        DetectionRecord { slot, detector, cause: ClickCause::Photon }
    }

    fn block_from_pairs(pairs: &[(bool, bool)]) -> SiftedBlock {
        SiftedBlock {
            client_bits: BitString::from_bools(&pairs.iter().map(|p| p.0).collect::<Vec<_>>()),
            hub_bits: BitString::from_bools(&pairs.iter().map(|p| p.1).collect::<Vec<_>>()),
            slot_map: (0..pairs.len() as u64).map(|i| i * 100).collect(),
            decoy_levels: vec![DecoyLevel::Signal; pairs.len()],
            session_id: "t".into(),
        }
    }

    #[test]
    fn test_sift_keeps_matching_bases() {
        let cfg = ChannelConfig::default();
        let tx = vec![
            pulse(0, Basis::Rectilinear, true),
            pulse(100, Basis::Diagonal, false),
            pulse(200, Basis::Rectilinear, false),
            pulse(300, Basis::Diagonal, true),
        ];
        let det = vec![
            click(0, Detector::V),   // matched rectilinear, bit 1
            click(100, Detector::H), // basis mismatch, dropped
            click(300, Detector::D), // matched diagonal, bit 0 (client sent 1)
        ];
        let block = sift(&tx, &det, &cfg, "s");
        assert_eq!(block.len(), 2);
        assert_eq!(block.slot_map, vec![0, 300]);
        assert!(block.client_bits.get(0) && block.hub_bits.get(0));
        assert!(block.client_bits.get(1) && !block.hub_bits.get(1));
    }

    #[test]
    fn test_sift_noiseless_saturated_channel_perfect_correlation() {
        // Saturated channel with no noise and discard of double clicks:
        // every surviving click agrees with the sender.
        let mut cfg = ChannelConfig::default();
        cfg.fiber_length_km = 0.0;
        cfg.detector_efficiency = 1.0;
        cfg.dark_prob = 0.0;
        cfg.intrinsic_error = 0.0;
        cfg.blocking_time_us = 0.0;
        // Keep the mean photon number moderate: with the passive receiver a
        // multiphoton pulse splitting across bases lands on two detectors
        // and is discarded, so survivors fall off like exp(-mu/2).
        cfg.mu = MuTable { vacuum: 0.0, decoy: 0.1, signal: 4.0 };
        cfg.double_click = crate::photonic::DoubleClickPolicy::StrictDiscard;
        let tx = transmit(&cfg, 4000, [0.0, 0.0, 1.0], [1; 32]).unwrap();
        let det = propagate_detect(&tx, &cfg, [2; 32]).unwrap();
        let block = sift(&tx, &det, &cfg, "s");
        assert!(block.len() > 100);
        assert_eq!(block.error_count(), 0);
        assert_eq!(block.client_bits, block.hub_bits);
    }

    #[test]
    fn test_sift_survival_near_half_for_random_bases() {
        let mut cfg = ChannelConfig::default();
        cfg.fiber_length_km = 10.0;
        cfg.dark_prob = 0.0;
        cfg.blocking_time_us = 0.0;
        let tx = transmit(&cfg, 200_000, [0.0, 0.0, 1.0], [3; 32]).unwrap();
        let det = propagate_detect(&tx, &cfg, [4; 32]).unwrap();
        let block = sift(&tx, &det, &cfg, "s");
        let clicked = det.len() as f64;
        let frac = block.len() as f64 / clicked;
        let tol = 3.0 * (0.25 / clicked).sqrt();
        assert!(
            (frac - 0.5).abs() <= tol,
            "sift survival {frac} vs 1/2 ± {tol} over {clicked} clicks"
        );
    }

    #[test]
    fn test_sift_empty_detections() {
        let cfg = ChannelConfig::default();
        let tx = vec![pulse(0, Basis::Rectilinear, true)];
        let block = sift(&tx, &[], &cfg, "s");
        assert!(block.is_empty());
    }

    #[test]
    fn test_shuffle_roundtrip_and_multiset() {
        let block = block_from_pairs(&[
            (true, true),
            (false, true),
            (true, false),
            (false, false),
            (true, true),
            (false, true),
        ]);
        let shuffled = shuffle(&block, [7; 32]);
        assert_eq!(shuffled.len(), block.len());
        assert_eq!(shuffled.error_count(), block.error_count());
        let mut orig_slots = block.slot_map.clone();
        let mut got_slots = shuffled.slot_map.clone();
        orig_slots.sort_unstable();
        got_slots.sort_unstable();
        assert_eq!(orig_slots, got_slots);
        assert_eq!(unshuffle(&shuffled, [7; 32]), block);
    }

    #[test]
    fn test_shuffle_single_bit_unchanged() {
        let block = block_from_pairs(&[(true, false)]);
        assert_eq!(shuffle(&block, [9; 32]), block);
    }

    #[test]
    fn test_shuffle_seeds_differ() {
        let pairs: Vec<(bool, bool)> = (0..1000).map(|i| (i % 3 == 0, i % 5 == 0)).collect();
        let block = block_from_pairs(&pairs);
        let a = shuffle(&block, [1; 32]);
        let b = shuffle(&block, [2; 32]);
        assert_ne!(a.slot_map, b.slot_map);
        assert_eq!(shuffle(&block, [1; 32]).slot_map, a.slot_map);
    }

    #[test]
    fn test_estimate_qber_extremes() {
        let same = block_from_pairs(&[(true, true); 50]);
        let (q, rest) = estimate_qber(&same, 0.2, [5; 32]).unwrap();
        assert_eq!(q, 0.0);
        assert_eq!(rest.len(), 40);

        let opposite = block_from_pairs(&[(true, false); 50]);
        let (q, _) = estimate_qber(&opposite, 0.2, [5; 32]).unwrap();
        assert_eq!(q, 1.0);
    }

    #[test]
    fn test_estimate_qber_errors() {
        let block = block_from_pairs(&[(true, true); 5]);
        assert!(matches!(
            estimate_qber(&block, 0.0, [0; 32]),
            Err(PostprocError::SampleFraction(_))
        ));
        assert!(matches!(
            estimate_qber(&block, 1.0, [0; 32]),
            Err(PostprocError::SampleFraction(_))
        ));
        assert!(matches!(
            estimate_qber(&block, 0.1, [0; 32]),
            Err(PostprocError::EmptySample { .. })
        ));
    }

    #[test]
    fn test_estimate_qber_statistical() {
        // A 2% channel sampled at 10% of 10^5 bits lands within 3 sigma.
        let mut rng = rng::stream(&[11; 32], &[b"test"]);
        let pairs: Vec<(bool, bool)> = (0..100_000)
            .map(|_| {
                let c = rng.random_bool(0.5);
                (c, c ^ rng.random_bool(0.02))
            })
            .collect();
        let block = block_from_pairs(&pairs);
        let (q, rest) = estimate_qber(&block, 0.1, [12; 32]).unwrap();
        let n = 10_000.0;
        let tol = 3.0 * (0.02f64 * 0.98 / n).sqrt();
        assert!((q - 0.02).abs() <= tol, "qber {q} vs 0.02 ± {tol}");
        assert_eq!(rest.len(), 90_000);
    }

    #[test]
    fn test_sampled_positions_removed() {
        let pairs: Vec<(bool, bool)> = (0..200).map(|i| (i % 2 == 0, i % 2 == 0)).collect();
        let block = block_from_pairs(&pairs);
        let (_, rest) = estimate_qber(&block, 0.25, [6; 32]).unwrap();
        assert_eq!(rest.len(), 150);
        // Remaining slots are a subset of the original, still sorted.
        assert!(rest.slot_map.windows(2).all(|w| w[0] < w[1]));
        let orig: std::collections::HashSet<u64> = block.slot_map.iter().copied().collect();
        assert!(rest.slot_map.iter().all(|s| orig.contains(s)));
    }

    #[test]
    fn test_collect_decoy_stats_counts() {
        let cfg = ChannelConfig::default();
        let mut tx = vec![
            pulse(0, Basis::Rectilinear, true),
            pulse(100, Basis::Rectilinear, false),
            pulse(200, Basis::Diagonal, true),
        ];
        tx[1].decoy_level = DecoyLevel::Decoy;
        tx[1].mean_photons = 0.1;
        tx[2].decoy_level = DecoyLevel::Vacuum;
        tx[2].mean_photons = 0.0;
        let det = vec![
            click(0, Detector::H),  // signal, matched, error (sent 1, saw 0)
            click(100, Detector::V), // decoy, matched, error (sent 0, saw 1)
        ];
        let block = sift(&tx, &det, &cfg, "s");
        let stats = collect_decoy_stats(&tx, &block);
        assert_eq!(stats.sent, [1, 1, 1]);
        assert_eq!(stats.clicked[DecoyLevel::Signal.index()], 1);
        assert_eq!(stats.errors[DecoyLevel::Signal.index()], 1);
        assert_eq!(stats.clicked[DecoyLevel::Decoy.index()], 1);
        assert_eq!(stats.errors[DecoyLevel::Decoy.index()], 1);
        assert_eq!(stats.clicked[DecoyLevel::Vacuum.index()], 0);
        assert_eq!(stats.mu, [0.0, 0.1, 0.5]);
        assert!(stats.check_consistent());
    }
}
