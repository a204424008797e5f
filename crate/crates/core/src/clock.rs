//! Monotonic and virtual time sources.
//!
//! Everything that reasons about deadlines (simulated NIC delays, dummy
//! benchmark tasks) reads time through a [`Clock`] so tests can swap the wall
//! clock for a manually advanced virtual one.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

#[derive(Clone, Debug)]
pub enum Clock {
    /// Nanoseconds since the clock was created.
    Monotonic(Instant),
    /// Nanoseconds that only move when advanced explicitly.
    Virtual(Arc<AtomicU64>),
}

impl Default for Clock {
    fn default() -> Self {
        Clock::monotonic()
    }
}

impl Clock {
    pub fn monotonic() -> Self {
        Clock::Monotonic(Instant::now())
    }

    pub fn virtual_time() -> Self {
        Clock::Virtual(Arc::new(AtomicU64::new(0)))
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self, Clock::Virtual(_))
    }

    #[inline]
    pub fn now_ns(&self) -> u64 {
        match self {
            Clock::Monotonic(base) => base.elapsed().as_nanos() as u64,
            Clock::Virtual(t) => t.load(Ordering::Acquire),
        }
    }

    /// Seconds as a float, in the style of `MPI_Wtime`.
    #[inline]
    pub fn wtime(&self) -> f64 {
        self.now_ns() as f64 * 1e-9
    }

    /// Moves virtual time forward by `ns`. No-op on the monotonic clock.
    pub fn advance(&self, ns: u64) {
        if let Clock::Virtual(t) = self {
            t.fetch_add(ns, Ordering::AcqRel);
        }
    }

    /// Moves virtual time forward to `ns` if it is behind. No-op on the
    /// monotonic clock.
    pub fn advance_to(&self, ns: u64) {
        if let Clock::Virtual(t) = self {
            t.fetch_max(ns, Ordering::AcqRel);
        }
    }

    /// Burns `ns` nanoseconds: spins on the monotonic clock, or charges the
    /// virtual clock.
    pub fn busy_wait(&self, ns: u64) {
        match self {
            Clock::Monotonic(base) => {
                let until = base.elapsed().as_nanos() as u64 + ns;
                while (base.elapsed().as_nanos() as u64) < until {
                    std::hint::spin_loop();
                }
            }
            Clock::Virtual(_) => self.advance(ns),
        }
    }
}
