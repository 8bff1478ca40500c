use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};

use super::{AllocId, Element, Tensor};
use crate::error::{Error, Result};

/// One retain (`delta > 0`) or release (`delta < 0`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEvent {
    pub alloc_id: AllocId,
    pub delta: i64,
    pub label: &'static str,
}

/// Byte-accurate record of tensors retained by autodiff tapes.
///
/// Only payload bytes are counted (8 per real sample, 16 per complex sample);
/// container overhead is not modeled.
#[derive(Debug, Default)]
pub struct MemoryLedger {
    live_bytes: usize,
    peak_bytes: usize,
    window_peak: usize,
    events: Vec<LedgerEvent>,
    retained: HashMap<AllocId, usize>,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn live_bytes(&self) -> usize {
        self.live_bytes
    }

    /// Running maximum of `live_bytes` over the ledger's lifetime.
    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    /// Maximum of `live_bytes` since the last [`MemoryLedger::reset_window`].
    pub fn window_peak(&self) -> usize {
        self.window_peak
    }

    pub fn reset_window(&mut self) {
        self.window_peak = self.live_bytes;
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    pub fn is_retained(&self, id: AllocId) -> bool {
        self.retained.contains_key(&id)
    }

    pub fn retain_bytes(&mut self, id: AllocId, bytes: usize, label: &'static str) -> Result<()> {
        if self.retained.contains_key(&id) {
            return Err(Error::DoubleRetain(id.0));
        }
        self.retained.insert(id, bytes);
        self.live_bytes += bytes;
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
        self.window_peak = self.window_peak.max(self.live_bytes);
        self.events.push(LedgerEvent {
            alloc_id: id,
            delta: bytes as i64,
            label,
        });
        Ok(())
    }

    pub fn retain<T: Element>(&mut self, t: &Tensor<T>, label: &'static str) -> Result<()> {
        self.retain_bytes(t.alloc_id(), t.payload_bytes(), label)
    }

    pub fn release(&mut self, id: AllocId) -> Result<()> {
        let bytes = self.retained.remove(&id).ok_or(Error::UnknownAllocation(id.0))?;
        self.live_bytes -= bytes;
        self.events.push(LedgerEvent {
            alloc_id: id,
            delta: -(bytes as i64),
            label: "release",
        });
        Ok(())
    }
}

/// Shared handle to one ledger; cloning shares the same ledger.
#[derive(Debug, Clone, Default)]
pub struct LedgerHandle(Arc<Mutex<MemoryLedger>>);

impl LedgerHandle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lock(&self) -> MutexGuard<'_, MemoryLedger> {
        // A poisoned ledger still holds consistent counters: every mutation
        // completes before any fallible call returns.
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn live_bytes(&self) -> usize {
        self.lock().live_bytes()
    }

    pub fn peak_bytes(&self) -> usize {
        self.lock().peak_bytes()
    }

    pub fn window_peak(&self) -> usize {
        self.lock().window_peak()
    }

    pub fn reset_window(&self) {
        self.lock().reset_window()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ComplexTensor, RealTensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn retain_counts_payload_bytes() {
        let mut l = MemoryLedger::new();
        let t = ComplexTensor::zeros(&[8, 8]).unwrap();
        l.retain(&t, "x").unwrap();
        assert_eq!(l.live_bytes(), 1024);
        let r = RealTensor::zeros(&[3]).unwrap();
        l.retain(&r, "r").unwrap();
        assert_eq!(l.live_bytes(), 1048);
        l.release(t.alloc_id()).unwrap();
        l.release(r.alloc_id()).unwrap();
        assert_eq!(l.live_bytes(), 0);
        assert_eq!(l.peak_bytes(), 1048);
    }

    #[test]
    fn double_retain_and_unknown_release_fail() {
        let mut l = MemoryLedger::new();
        let t = RealTensor::zeros(&[2]).unwrap();
        l.retain(&t, "a").unwrap();
        assert!(matches!(l.retain(&t, "a"), Err(Error::DoubleRetain(_))));
        let other = RealTensor::zeros(&[2]).unwrap();
        assert!(matches!(l.release(other.alloc_id()), Err(Error::UnknownAllocation(_))));
        l.release(t.alloc_id()).unwrap();
        assert!(l.release(t.alloc_id()).is_err());
    }

    #[test]
    fn peak_equals_max_prefix_sum_of_replayed_events() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut l = MemoryLedger::new();
        let mut live: Vec<RealTensor> = Vec::new();
        for _ in 0..500 {
            if live.is_empty() || rng.random_bool(0.55) {
                let n = rng.random_range(1..50);
                let t = RealTensor::zeros(&[n]).unwrap();
                l.retain(&t, "t").unwrap();
                live.push(t);
            } else {
                let i = rng.random_range(0..live.len());
                let t = live.swap_remove(i);
                l.release(t.alloc_id()).unwrap();
            }
            assert!(l.peak_bytes() >= l.live_bytes());
        }
        let (mut sum, mut max) = (0i64, 0i64);
        for e in l.events() {
            sum += e.delta;
            max = max.max(sum);
        }
        assert_eq!(sum as usize, l.live_bytes());
        assert_eq!(max as usize, l.peak_bytes());
        for t in live.drain(..) {
            l.release(t.alloc_id()).unwrap();
        }
        assert_eq!(l.live_bytes(), 0);
    }

    #[test]
    fn window_peak_resets_to_live() {
        let mut l = MemoryLedger::new();
        let a = RealTensor::zeros(&[10]).unwrap();
        let b = RealTensor::zeros(&[5]).unwrap();
        l.retain(&a, "a").unwrap();
        l.release(a.alloc_id()).unwrap();
        l.reset_window();
        assert_eq!(l.window_peak(), 0);
        l.retain(&b, "b").unwrap();
        assert_eq!(l.window_peak(), 40);
        assert_eq!(l.peak_bytes(), 80);
    }
}
