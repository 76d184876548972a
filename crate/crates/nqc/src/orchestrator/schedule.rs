//! Time-multiplexing: clients share the hub's receiver by taking turns
//! on the active pulse positions, round-robin in configured order.

use crate::photonic::PulsePattern;

/// The pulse pattern client `position` of `total` transmits on: every
/// `total`'th active pulse position, starting at its own slot.
pub fn pattern_for(position: usize, total: usize) -> PulsePattern {
    assert!(total >= 1 && position < total);
    PulsePattern { offset: position as u64, stride: total as u64 }
}

/// Assigns each of the `pulses_per_superframe` active pulse positions of
/// one superframe to a client, round-robin over `order`. Every client's
/// share is within one slot of the fair share.
pub fn schedule(order: &[u32], pulses_per_superframe: u64) -> Vec<u32> {
    assert!(!order.is_empty(), "schedule needs at least one client");
    (0..pulses_per_superframe).map(|i| order[(i % order.len() as u64) as usize]).collect()
}
