use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

/// Seconds on a clock that never goes backwards.
pub trait Clock: Send + Sync {
    fn now_s(&self) -> f64;
}

#[derive(Debug)]
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now_s(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }
}

/// Test clock advanced by hand, in whole microseconds.
#[derive(Debug, Default)]
pub struct ManualClock {
    micros: AtomicU64,
}

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, seconds: f64) {
        assert!(seconds >= 0.0, "clock cannot go backwards");
        self.micros.fetch_add((seconds * 1e6).round() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_s(&self) -> f64 {
        self.micros.load(Ordering::SeqCst) as f64 / 1e6
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manual_clock_advances() {
        let c = ManualClock::new();
        assert_eq!(c.now_s(), 0.0);
        c.advance(1.25);
        c.advance(0.000_001);
        assert_eq!(c.now_s(), 1.250_001);
    }

    #[test]
    fn monotonic_clock_never_decreases() {
        let c = MonotonicClock::new();
        let a = c.now_s();
        let b = c.now_s();
        assert!(b >= a);
    }
}
