//! A user-space storage engine that puts a write-ahead log on (emulated)
//! persistent memory beside a volatile page cache.
//!
//! Synchronous writes are absorbed by per-inode logs on NVM, while the page
//! cache keeps serving reads and writes asynchronously back to a
//! latency-simulated disk. Write-back record entries expire log entries whose
//! data reached disk, and crash recovery replays only unexpired entries.

pub mod cache;
pub mod config;
pub mod crashtest;
pub mod disk;
pub mod dump;
pub mod engine;
pub mod error;
pub mod gc;
pub mod layout;
pub mod log;
pub mod oracle;
pub mod pmem;
pub mod pool;
pub mod recovery;
pub mod simclock;
pub mod sync;
pub mod trace;
pub mod workload;
pub mod writeback;

pub const PAGE_SIZE: usize = 4096;
pub const LINE_SIZE: usize = 64;

pub use config::{ActsyncScope, Config};
pub use crashtest::{campaign, CrashOptions, CrashReport, GenOptions, Mutation};
pub use disk::{Disk, DiskState};
pub use dump::dump_log;
pub use engine::{Engine, EngineStats};
pub use error::{Error, Result};
pub use gc::GcStats;
pub use oracle::Oracle;
pub use pmem::{PmemDevice, PmemMode};
pub use recovery::{recover, RecoverOptions, RecoveryReport};
pub use simclock::LatencyMode;
pub use trace::{CommitPath, SyncMode, TraceEvent, TraceRecord, TraceSink};
pub use workload::{run_bench, Access, BenchResult, Maintenance, MetricsRow, RwRatio, SyncStyle, WorkloadSpec};
