//! Thread-local multiply-accumulate counter used to verify complexity claims.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn record(macs: u64) {
    MACS.with(|c| c.set(c.get().wrapping_add(macs)));
}

/// Multiply-accumulates performed by matrix kernels on this thread since the
/// last [`reset`].
pub fn count() -> u64 {
    MACS.with(Cell::get)
}

pub fn reset() {
    MACS.with(|c| c.set(0));
}

/// Runs `f` and returns its result with the MACs it performed.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = count();
    let out = f();
    (out, count().wrapping_sub(before))
}
