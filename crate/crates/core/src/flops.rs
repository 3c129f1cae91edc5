//! Instrumented floating-point operation counter.
//!
//! Every numeric kernel reports the work it performed to a thread-local
//! tally. Wrapping a computation in [`measure`] yields the count, which the
//! tests compare against the analytic cost model.
//!
//! Convention: one multiply-accumulate is two FLOPs. Element-wise kernels
//! charge the fixed per-element costs below.

use std::cell::Cell;

/// Bias add, residual add, positional add, pooling sum, attention scaling.
pub const ELEMENTWISE: u64 = 1;
/// Max subtraction, exp, division.
pub const SOFTMAX_PER_ELEM: u64 = 3;
/// Mean, variance, normalize, gain, shift.
pub const LAYERNORM_PER_ELEM: u64 = 5;
/// Cube, scale, add, tanh, add-one, multiply, halve, multiply.
pub const GELU_PER_ELEM: u64 = 8;

thread_local! {
    static TALLY: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn add(n: u64) {
    TALLY.with(|t| t.set(t.get().wrapping_add(n)));
}

#[inline]
pub(crate) fn add_macs(macs: usize) {
    add(2 * macs as u64);
}

/// Runs `f` and returns its result together with the FLOPs it reported.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = TALLY.with(Cell::get);
    let out = f();
    let after = TALLY.with(Cell::get);
    (out, after.wrapping_sub(before))
}
