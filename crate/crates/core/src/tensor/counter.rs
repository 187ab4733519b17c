//! Thread-local operation counter.
//!
//! Every forward kernel in [`super::ops`] reports the multiply-accumulates and
//! scalar operations it executed, derived from the tensors it actually saw at
//! run time. The closed-form cost model is checked against these tallies.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub macs: u64,
    pub flops: u64,
}

impl std::ops::Sub for OpCounts {
    type Output = OpCounts;

    fn sub(self, rhs: OpCounts) -> OpCounts {
        OpCounts {
            macs: self.macs - rhs.macs,
            flops: self.flops - rhs.flops,
        }
    }
}

thread_local! {
    static COUNTS: Cell<OpCounts> = const { Cell::new(OpCounts { macs: 0, flops: 0 }) };
}

pub(crate) fn record(macs: u64, flops: u64) {
    COUNTS.with(|c| {
        let cur = c.get();
        c.set(OpCounts {
            macs: cur.macs + macs,
            flops: cur.flops + flops,
        });
    });
}

/// Current totals for this thread.
pub fn snapshot() -> OpCounts {
    COUNTS.with(|c| c.get())
}

pub fn reset() {
    COUNTS.with(|c| c.set(OpCounts::default()));
}

/// Runs `f` and returns what it executed on this thread alongside its result.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, OpCounts) {
    let before = snapshot();
    let out = f();
    (out, snapshot() - before)
}
