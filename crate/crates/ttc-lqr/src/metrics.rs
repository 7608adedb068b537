//! Thread-local operation counters.
//!
//! Solvers record every dense factorization, every symplectic sweep step, and
//! every reverse sweep they perform. Counters are thread-local, so a batch
//! worker observes exact counts for the closures it runs regardless of how
//! work is scheduled; totals are exact integers independent of threading.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    /// Dense matrix factorizations (LU or Cholesky of a dense block).
    pub dense_factorizations: u64,
    /// Individual steps of forward or reverse symplectic sweeps.
    pub sweep_steps: u64,
    /// Whole reverse symplectic sweeps started.
    pub reverse_sweeps: u64,
}

impl Counts {
    pub fn since(&self, earlier: &Counts) -> Counts {
        Counts {
            dense_factorizations: self.dense_factorizations - earlier.dense_factorizations,
            sweep_steps: self.sweep_steps - earlier.sweep_steps,
            reverse_sweeps: self.reverse_sweeps - earlier.reverse_sweeps,
        }
    }

    pub fn add(&mut self, other: &Counts) {
        self.dense_factorizations += other.dense_factorizations;
        self.sweep_steps += other.sweep_steps;
        self.reverse_sweeps += other.reverse_sweeps;
    }
}

thread_local! {
    static FACTORIZATIONS: Cell<u64> = const { Cell::new(0) };
    static SWEEP_STEPS: Cell<u64> = const { Cell::new(0) };
    static REVERSE_SWEEPS: Cell<u64> = const { Cell::new(0) };
}

/// Cumulative counts recorded on the calling thread.
pub fn counts() -> Counts {
    Counts {
        dense_factorizations: FACTORIZATIONS.with(|c| c.get()),
        sweep_steps: SWEEP_STEPS.with(|c| c.get()),
        reverse_sweeps: REVERSE_SWEEPS.with(|c| c.get()),
    }
}

/// Runs `f` and returns its result together with the counts it recorded.
///
/// The delta is exact because the closure executes on a single thread.
pub fn with_counts<R>(f: impl FnOnce() -> R) -> (R, Counts) {
    let before = counts();
    let out = f();
    (out, counts().since(&before))
}

pub(crate) fn record_factorization() {
    FACTORIZATIONS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn record_sweep_step() {
    SWEEP_STEPS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn record_reverse_sweep() {
    REVERSE_SWEEPS.with(|c| c.set(c.get() + 1));
}
