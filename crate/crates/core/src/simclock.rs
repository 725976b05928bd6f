//! Per-thread simulated device time.
//!
//! Device latencies (NVM line stores, disk page writes) are charged here
//! instead of being slept, so benchmark results are reproducible. The
//! benchmark driver adds the charged time to measured compute time.

use std::cell::Cell;
use std::time::Duration;

thread_local! {
    static CHARGED_NS: Cell<u64> = const { Cell::new(0) };
}

/// How simulated device latency is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LatencyMode {
    /// Accumulate on the calling thread's simulated clock.
    #[default]
    Account,
    /// Sleep for the latency (wall-clock experiments).
    Sleep,
    /// Ignore latency entirely (crash tests).
    Off,
}

impl std::str::FromStr for LatencyMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "account" => Ok(Self::Account),
            "sleep" => Ok(Self::Sleep),
            "off" => Ok(Self::Off),
            other => Err(format!("unknown latency mode `{other}`")),
        }
    }
}

pub fn charge(mode: LatencyMode, ns: u64) {
    if ns == 0 {
        return;
    }
    match mode {
        LatencyMode::Account => CHARGED_NS.with(|c| c.set(c.get() + ns)),
        LatencyMode::Sleep => std::thread::sleep(Duration::from_nanos(ns)),
        LatencyMode::Off => {}
    }
}

/// Simulated nanoseconds charged to this thread so far.
pub fn charged_ns() -> u64 {
    CHARGED_NS.with(|c| c.get())
}

/// Returns and clears this thread's charged time.
pub fn take_ns() -> u64 {
    CHARGED_NS.with(|c| c.replace(0))
}
