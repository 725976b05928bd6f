//! FIO-style workload runner with CSV metrics.
//!
//! Each worker owns one file. Time is virtual: the worker's measured compute
//! time plus the device latency charged to its thread. Inline maintenance
//! (write-back ticks, GC passes) runs between operations and is excluded
//! from the worker's clock, the way a background flusher would be.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::engine::{Engine, EngineStats};
use crate::error::{Error, Result};
use crate::simclock;

/// Reads per write, written `r/w` (e.g. `3/7`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RwRatio {
    pub reads: u32,
    pub writes: u32,
}

impl FromStr for RwRatio {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (r, w) = s.split_once('/').ok_or_else(|| format!("expected r/w, got `{s}`"))?;
        let reads = r.trim().parse().map_err(|_| format!("bad read share `{r}`"))?;
        let writes = w.trim().parse().map_err(|_| format!("bad write share `{w}`"))?;
        if reads == 0 && writes == 0 {
            return Err("r/w ratio 0/0 has no operations".into());
        }
        Ok(RwRatio { reads, writes })
    }
}

impl fmt::Display for RwRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.reads, self.writes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Seq,
    Random { seed: u64 },
}

impl FromStr for Access {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "seq" => Ok(Access::Seq),
            "random" => Ok(Access::Random { seed: 0 }),
            _ => match s.strip_prefix("random:") {
                Some(n) => n.parse().map(|seed| Access::Random { seed }).map_err(|_| format!("bad seed in `{s}`")),
                None => Err(format!("unknown access `{s}` (expected seq|random|random:SEED)")),
            },
        }
    }
}

/// How a synchronized write is issued.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncStyle {
    OSync,
    Fsync,
    Fdatasync,
}

impl FromStr for SyncStyle {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "o_sync" | "osync" => Ok(SyncStyle::OSync),
            "fsync" => Ok(SyncStyle::Fsync),
            "fdatasync" => Ok(SyncStyle::Fdatasync),
            _ => Err(format!("unknown sync style `{s}` (expected o_sync|fsync|fdatasync)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Maintenance {
    /// Write-back tick and GC pass every N operations of each worker
    /// (0 disables). Deterministic for a single worker.
    Inline { tick_every: u64, gc_every: u64 },
    /// Background threads at the configured intervals.
    Threads,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub rw_ratio: RwRatio,
    /// Percentage of writes that are synchronized.
    pub sync_pct: u32,
    pub io_size: u64,
    pub access: Access,
    pub threads: usize,
    /// Bytes read and written over all workers.
    pub total_bytes: u64,
    pub sync_style: SyncStyle,
    /// Span of each worker's file. Offsets wrap inside it.
    pub file_size: u64,
    pub seed: u64,
    pub prewarm: bool,
    /// Virtual time between metric rows.
    pub metrics_interval_ms: u64,
    pub maintenance: Maintenance,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            rw_ratio: RwRatio { reads: 0, writes: 1 },
            sync_pct: 100,
            io_size: 4096,
            access: Access::Seq,
            threads: 1,
            total_bytes: 16 << 20,
            sync_style: SyncStyle::OSync,
            file_size: 16 << 20,
            seed: 1,
            prewarm: true,
            metrics_interval_ms: 100,
            maintenance: Maintenance::Inline { tick_every: 64, gc_every: 4096 },
        }
    }
}

impl WorkloadSpec {
    /// Mail-server-like mix: one read per synchronized small write.
    pub fn varmail() -> Self {
        WorkloadSpec {
            rw_ratio: RwRatio { reads: 1, writes: 1 },
            sync_pct: 100,
            io_size: 2048,
            access: Access::Random { seed: 7 },
            sync_style: SyncStyle::Fsync,
            file_size: 4 << 20,
            total_bytes: 8 << 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.sync_pct > 100 {
            return bad("sync_pct must be within 0..=100");
        }
        if self.io_size == 0 {
            return bad("io_size must be at least 1");
        }
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        if self.file_size < self.io_size {
            return bad("file_size must hold at least one I/O");
        }
        if self.rw_ratio.reads == 0 && self.rw_ratio.writes == 0 {
            return bad("r/w ratio has no operations");
        }
        if self.metrics_interval_ms == 0 {
            return bad("metrics_interval_ms must be positive");
        }
        Ok(())
    }

    fn ops_per_worker(&self) -> u64 {
        (self.total_bytes / self.threads as u64).div_ceil(self.io_size)
    }
}

/// One CSV row. `fallback_active` is 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsRow {
    pub timestamp: f64,
    pub ops_per_sec: f64,
    pub bytes_per_sec: f64,
    pub nvm_pages_in_use: u64,
    pub dirty_pages: u64,
    pub fallback_active: u8,
}

pub const CSV_HEADER: [&str; 6] = ["timestamp", "ops_per_sec", "bytes_per_sec", "nvm_pages_in_use", "dirty_pages", "fallback_active"];

/// Writes the header and one line per row. The header is written even
/// when there are no rows.
pub fn write_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub ops: u64,
    pub reads: u64,
    pub writes: u64,
    pub sync_writes: u64,
    pub bytes: u64,
    /// Virtual run time of the slowest worker.
    pub elapsed_ns: u64,
    pub ops_per_sec: f64,
    pub bytes_per_sec: f64,
    pub peak_nvm_pages: u64,
    #[serde(skip)]
    pub rows: Vec<MetricsRow>,
    pub stats: EngineStats,
}

#[derive(Debug, Clone, Copy, Default)]
struct Sample {
    ops: u64,
    bytes: u64,
    nvm: u64,
    dirty: u64,
    fallback: bool,
}

#[derive(Default)]
struct WorkerOut {
    samples: Vec<Sample>,
    ops: u64,
    reads: u64,
    sync_writes: u64,
    bytes: u64,
    elapsed_ns: u64,
    peak_nvm: u64,
}

fn ino_of(worker: usize) -> u64 {
    worker as u64 + 1
}

/// Fills each worker file and writes it back, so the run starts with a
/// warm, clean cache.
pub fn prewarm(engine: &Engine, spec: &WorkloadSpec) -> Result<()> {
    let chunk = vec![0x5au8; 1 << 20];
    for w in 0..spec.threads {
        let mut off = 0;
        while off < spec.file_size {
            let n = (spec.file_size - off).min(chunk.len() as u64) as usize;
            engine.write(ino_of(w), off, &chunk[..n])?;
            off += n as u64;
        }
    }
    engine.drain()?;
    engine.gc_pass()?;
    Ok(())
}

/// Runs `spec` against `engine` and returns per-interval metrics.
pub fn run_bench(engine: &Arc<Engine>, spec: &WorkloadSpec) -> Result<BenchResult> {
    spec.validate()?;
    if spec.prewarm {
        prewarm(engine, spec)?;
    }
    let background = matches!(spec.maintenance, Maintenance::Threads).then(|| engine.spawn_background());
    let outs: Vec<Result<WorkerOut>> = if spec.threads == 1 {
        vec![worker(engine, spec, 0)]
    } else {
        std::thread::scope(|s| {
            let hs: Vec<_> = (0..spec.threads).map(|w| s.spawn(move || worker(engine, spec, w))).collect();
            hs.into_iter().map(|h| h.join().expect("bench worker panicked")).collect()
        })
    };
    drop(background);
    let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(merge(engine, spec, outs))
}

fn worker(engine: &Engine, spec: &WorkloadSpec, w: usize) -> Result<WorkerOut> {
    let ino = ino_of(w);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ w as u64);
    let mut place = match spec.access {
        Access::Seq => None,
        Access::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed ^ ((w as u64) << 32))),
    };
    let io = spec.io_size as usize;
    let mut buf = vec![0u8; io + 64];
    rng.fill_bytes(&mut buf);
    let blocks = spec.file_size / spec.io_size;
    let share = spec.rw_ratio.reads + spec.rw_ratio.writes;
    let interval = spec.metrics_interval_ms * 1_000_000;

    let mut out = WorkerOut::default();
    let mut excluded = Duration::ZERO;
    let mut sim_ns = 0u64;
    let mut next_sample = interval;
    simclock::take_ns();
    let start = Instant::now();
    for k in 0..spec.ops_per_worker() {
        let block = match &mut place {
            None => k % blocks,
            Some(r) => r.gen_range(0..blocks),
        };
        let offset = block * spec.io_size;
        if rng.gen_range(0..share) < spec.rw_ratio.reads {
            let got = engine.read(ino, offset, io)?;
            out.reads += 1;
            out.bytes += got.len() as u64;
        } else {
            let data = &buf[(k % 64) as usize..][..io];
            if rng.gen_range(0..100) < spec.sync_pct {
                match spec.sync_style {
                    SyncStyle::OSync => {
                        engine.pwrite_sync(ino, offset, data)?;
                    }
                    SyncStyle::Fsync => {
                        engine.write(ino, offset, data)?;
                        engine.fsync(ino)?;
                    }
                    SyncStyle::Fdatasync => {
                        engine.write(ino, offset, data)?;
                        engine.fdatasync(ino)?;
                    }
                }
                out.sync_writes += 1;
            } else {
                engine.write(ino, offset, data)?;
            }
            out.bytes += io as u64;
        }
        out.ops += 1;
        sim_ns += simclock::take_ns();

        let paused = Instant::now();
        if let Maintenance::Inline { tick_every, gc_every } = spec.maintenance {
            if tick_every > 0 && (k + 1) % tick_every == 0 {
                engine.writeback_tick()?;
            }
            if gc_every > 0 && (k + 1) % gc_every == 0 {
                engine.gc_pass()?;
            }
        }
        let now = (start.elapsed() - excluded).as_nanos() as u64 + sim_ns;
        if now >= next_sample {
            let s = engine.stats();
            out.peak_nvm = out.peak_nvm.max(s.nvm_pages_in_use);
            let sample = Sample {
                ops: out.ops,
                bytes: out.bytes,
                nvm: s.nvm_pages_in_use,
                dirty: s.dirty_pages,
                fallback: s.fallback_active,
            };
            while now >= next_sample {
                out.samples.push(sample);
                next_sample += interval;
            }
        }
        simclock::take_ns();
        excluded += paused.elapsed();
    }
    out.elapsed_ns = ((start.elapsed() - excluded).as_nanos() as u64 + sim_ns).max(1);
    Ok(out)
}

fn merge(engine: &Engine, spec: &WorkloadSpec, outs: Vec<WorkerOut>) -> BenchResult {
    let stats = engine.stats();
    let interval_s = spec.metrics_interval_ms as f64 / 1000.0;
    let rows_n = outs.iter().map(|o| o.samples.len()).max().unwrap_or(0);
    let mut rows = Vec::with_capacity(rows_n);
    let mut prev = Sample::default();
    for i in 0..rows_n {
        // a finished worker contributes its final totals
        let at = |o: &WorkerOut| o.samples.get(i).copied().unwrap_or(Sample { ops: o.ops, bytes: o.bytes, ..Sample::default() });
        let ops: u64 = outs.iter().map(|o| at(o).ops).sum();
        let bytes: u64 = outs.iter().map(|o| at(o).bytes).sum();
        let probe = outs.iter().find_map(|o| o.samples.get(i).copied()).unwrap_or_default();
        rows.push(MetricsRow {
            timestamp: (i + 1) as f64 * interval_s,
            ops_per_sec: (ops - prev.ops) as f64 / interval_s,
            bytes_per_sec: (bytes - prev.bytes) as f64 / interval_s,
            nvm_pages_in_use: probe.nvm,
            dirty_pages: probe.dirty,
            fallback_active: probe.fallback as u8,
        });
        prev = Sample { ops, bytes, ..prev };
    }
    let ops: u64 = outs.iter().map(|o| o.ops).sum();
    let bytes: u64 = outs.iter().map(|o| o.bytes).sum();
    let reads: u64 = outs.iter().map(|o| o.reads).sum();
    let elapsed_ns = outs.iter().map(|o| o.elapsed_ns).max().unwrap_or(1);
    let secs = elapsed_ns as f64 / 1e9;
    // the tail after the last full interval, so short runs still report
    let tail = secs - rows_n as f64 * interval_s;
    if ops > prev.ops && tail > 0.0 {
        rows.push(MetricsRow {
            timestamp: secs,
            ops_per_sec: (ops - prev.ops) as f64 / tail,
            bytes_per_sec: (bytes - prev.bytes) as f64 / tail,
            nvm_pages_in_use: stats.nvm_pages_in_use,
            dirty_pages: stats.dirty_pages,
            fallback_active: stats.fallback_active as u8,
        });
    }
    BenchResult {
        ops,
        reads,
        writes: ops - reads,
        sync_writes: outs.iter().map(|o| o.sync_writes).sum(),
        bytes,
        elapsed_ns,
        ops_per_sec: ops as f64 / secs,
        bytes_per_sec: bytes as f64 / secs,
        peak_nvm_pages: outs.iter().map(|o| o.peak_nvm).max().unwrap_or(0).max(stats.nvm_pages_in_use),
        rows,
        stats,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::simclock::LatencyMode;

    fn engine() -> Arc<Engine> {
        let cfg = Config { latency_mode: LatencyMode::Off, nvm_size_pages: 4096, ..Config::default() };
        Arc::new(Engine::new(cfg).unwrap())
    }

    fn small() -> WorkloadSpec {
        WorkloadSpec { total_bytes: 1 << 20, file_size: 1 << 20, ..WorkloadSpec::default() }
    }

    #[test]
    fn parses_knobs() {
        assert_eq!("3/7".parse::<RwRatio>().unwrap(), RwRatio { reads: 3, writes: 7 });
        assert!("0/0".parse::<RwRatio>().is_err());
        assert_eq!("random:9".parse::<Access>().unwrap(), Access::Random { seed: 9 });
        assert_eq!("fdatasync".parse::<SyncStyle>().unwrap(), SyncStyle::Fdatasync);
        let bad = WorkloadSpec { sync_pct: 101, ..small() };
        assert!(bad.validate().is_err());
        assert!(WorkloadSpec { io_size: 0, ..small() }.validate().is_err());
    }

    #[test]
    fn async_run_logs_nothing() {
        let e = engine();
        let r = run_bench(&e, &WorkloadSpec { sync_pct: 0, rw_ratio: RwRatio { reads: 5, writes: 5 }, ..small() }).unwrap();
        assert_eq!(r.stats.ops.logged_txns, 0);
        assert_eq!(r.sync_writes, 0);
        assert!(r.reads > 0 && r.writes > 0);
    }

    #[test]
    fn aligned_sync_writes_are_all_oop() {
        let e = engine();
        let r = run_bench(&e, &small()).unwrap();
        assert_eq!(r.sync_writes, 256);
        assert_eq!(r.stats.ops.oop_pages_logged, 256);
        assert_eq!(r.stats.ops.ip_payload_bytes, 0);
    }

    #[test]
    fn seeded_runs_repeat_counts() {
        let spec = WorkloadSpec { access: Access::Random { seed: 3 }, rw_ratio: RwRatio { reads: 3, writes: 7 }, sync_pct: 40, io_size: 1000, ..small() };
        let a = run_bench(&engine(), &spec).unwrap();
        let b = run_bench(&engine(), &spec).unwrap();
        assert_eq!((a.reads, a.sync_writes, a.stats.ops), (b.reads, b.sync_writes, b.stats.ops));
    }

    #[test]
    fn csv_has_stable_header() {
        let rows = [MetricsRow { timestamp: 0.1, ops_per_sec: 10.0, bytes_per_sec: 40960.0, nvm_pages_in_use: 3, dirty_pages: 1, fallback_active: 0 }];
        let mut out = Vec::new();
        write_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next().unwrap(), "timestamp,ops_per_sec,bytes_per_sec,nvm_pages_in_use,dirty_pages,fallback_active");
        assert_eq!(text.lines().nth(1).unwrap(), "0.1,10.0,40960.0,3,1,0");

        let mut out = Vec::new();
        write_csv(&[], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 1);
    }

    #[test]
    fn run_shorter_than_an_interval_gets_a_tail_row() {
        let spec = WorkloadSpec { total_bytes: 64 << 10, metrics_interval_ms: 60_000, ..small() };
        let r = run_bench(&engine(), &spec).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert!(r.rows[0].ops_per_sec > 0.0);
        assert!((r.rows[0].timestamp - r.elapsed_ns as f64 / 1e9).abs() < 1e-9);
    }
}
