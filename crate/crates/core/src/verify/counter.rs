//! Operation-count instrumentation.
//!
//! Kernels report multiply-accumulates into a thread-local tally. The tally is
//! only live inside [`measure`]; outside a measured region recording is a
//! no-op apart from one thread-local flag read.

use std::cell::Cell;
use std::time::Instant;

/// Counters collected over one measured region.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostCounter {
    /// All multiply-accumulates: dense products plus softmax normalisation.
    pub mac_count: u64,
    /// Subset of `mac_count` spent on query-key scores and the weighted value
    /// sum, i.e. the pairwise interaction terms of an attention block.
    pub interaction_macs: u64,
    pub bytes_touched: u64,
    pub wall_ns: u64,
}

impl CostCounter {
    pub fn merge(&mut self, other: &CostCounter) {
        self.mac_count += other.mac_count;
        self.interaction_macs += other.interaction_macs;
        self.bytes_touched += other.bytes_touched;
        self.wall_ns += other.wall_ns;
    }
}

#[derive(Clone, Copy, Default)]
struct Tally {
    macs: u64,
    interaction: u64,
    bytes: u64,
}

thread_local! {
    static ACTIVE: Cell<u32> = const { Cell::new(0) };
    static TALLY: Cell<Tally> = const { Cell::new(Tally { macs: 0, interaction: 0, bytes: 0 }) };
}

#[inline]
fn active() -> bool {
    ACTIVE.with(|a| a.get() > 0)
}

/// Records `macs` multiply-accumulates that touched `bytes` bytes.
#[inline]
pub fn record(macs: u64, bytes: u64) {
    if active() {
        TALLY.with(|t| {
            let mut v = t.get();
            v.macs += macs;
            v.bytes += bytes;
            t.set(v);
        });
    }
}

/// Marks `macs` already passed to [`record`] as pairwise-interaction work.
#[inline]
pub fn tag_interaction(macs: u64) {
    if active() {
        TALLY.with(|t| {
            let mut v = t.get();
            v.interaction += macs;
            t.set(v);
        });
    }
}

/// Runs `f` and returns its result together with the counters it produced.
///
/// Regions nest: an inner `measure` sees only its own work, and its counts
/// are folded back into the enclosing region.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, CostCounter) {
    let saved = TALLY.with(|t| t.replace(Tally::default()));
    ACTIVE.with(|a| a.set(a.get() + 1));
    let start = Instant::now();
    let out = f();
    let wall_ns = start.elapsed().as_nanos() as u64;
    ACTIVE.with(|a| a.set(a.get() - 1));
    let inner = TALLY.with(|t| t.get());
    TALLY.with(|t| {
        t.set(Tally {
            macs: saved.macs + inner.macs,
            interaction: saved.interaction + inner.interaction,
            bytes: saved.bytes + inner.bytes,
        })
    });
    (
        out,
        CostCounter {
            mac_count: inner.macs,
            interaction_macs: inner.interaction,
            bytes_touched: inner.bytes,
            wall_ns,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recording_outside_a_region_is_dropped() {
        record(10, 10);
        let (_, c) = measure(|| record(3, 4));
        assert_eq!(c.mac_count, 3);
        assert_eq!(c.bytes_touched, 4);
    }

    #[test]
    fn nested_regions_fold_into_parent() {
        let ((_, inner), outer) = measure(|| {
            record(1, 0);
            let r = measure(|| {
                record(5, 0);
                tag_interaction(2);
            });
            record(1, 0);
            r
        });
        assert_eq!(inner.mac_count, 5);
        assert_eq!(inner.interaction_macs, 2);
        assert_eq!(outer.mac_count, 7);
        assert_eq!(outer.interaction_macs, 2);
    }
}
