//! Crash-injection campaigns.
//!
//! A workload runs on a fresh engine with tracing on. At every fence the
//! device calls back into the harness, which brings the oracle up to date,
//! materializes the crash images the pending lines allow, recovers each one
//! on a copy of the disk and checks the result against the oracle's
//! admissible set. Crashes right after each garbage-collection pass and at
//! the end of the run are checked the same way.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ActsyncScope, Config};
use crate::disk::Disk;
use crate::engine::Engine;
use crate::error::Result;
use crate::oracle::{Oracle, VerifyCache};
use crate::pmem::{CrashPolicy, CrashView, PmemMode};
use crate::recovery::{recover, RecoverOptions};
use crate::simclock::LatencyMode;
use crate::trace::{CommitPath, TraceEvent, TraceSink};
use crate::PAGE_SIZE;

const PS: u64 = PAGE_SIZE as u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    #[default]
    None,
    /// Omit the fence between entry persistence and the tail update.
    DropCommitFence,
    /// Never append write-back records.
    SkipWbRecord,
    /// Recover without honoring write-back records.
    NoExpiry,
}

impl std::str::FromStr for Mutation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "drop-commit-fence" => Ok(Self::DropCommitFence),
            "skip-wb-record" => Ok(Self::SkipWbRecord),
            "no-expiry" => Ok(Self::NoExpiry),
            other => Err(format!("unknown mutation `{other}` (none|drop-commit-fence|skip-wb-record|no-expiry)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Write { ino: u64, offset: u64, data: Vec<u8> },
    SyncWrite { ino: u64, offset: u64, data: Vec<u8> },
    Fsync(u64),
    Fdatasync(u64),
    SetOSync(u64, bool),
    Tick,
    Gc,
    Read { ino: u64, offset: u64, len: usize },
}

#[derive(Debug, Clone)]
pub struct Workload {
    pub seed: u64,
    pub cfg: Config,
    pub sync_pct: u32,
    pub ops: Vec<Op>,
}

/// Shape knobs for generated workloads.
#[derive(Debug, Clone, Copy)]
pub struct GenOptions {
    pub max_files: u64,
    pub max_pages: u64,
    /// One workload in this many is long.
    pub long_every: u64,
    pub long_ops: usize,
    pub tiny_nvm: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions { max_files: 8, max_pages: 64, long_every: 50, long_ops: 1000, tiny_nvm: false }
    }
}

fn pick_extent(rng: &mut ChaCha8Rng, span: u64) -> (u64, u64) {
    let (off, len) = match rng.gen_range(0..100) {
        0..=34 => (rng.gen_range(0..span), rng.gen_range(1..=64)),
        35..=54 => (rng.gen_range(0..span), rng.gen_range(65..=600)),
        55..=69 => (rng.gen_range(0..span.div_ceil(PS)) * PS, rng.gen_range(1..=3) * PS),
        70..=79 => {
            let b = rng.gen_range(1..=span.div_ceil(PS)) * PS;
            (b.saturating_sub(rng.gen_range(1..100)), rng.gen_range(100..=300))
        }
        80..=89 => (rng.gen_range(0..span), rng.gen_range(1..=9000)),
        _ => {
            let len = rng.gen_range(4001..=4095);
            (rng.gen_range(0..span.div_ceil(PS)) * PS + rng.gen_range(0..=PS - len), len)
        }
    };
    let len = len.min(span);
    (off.min(span - len), len)
}

/// A reproducible random workload.
pub fn generate(seed: u64, g: &GenOptions) -> Workload {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_ops = if seed % g.long_every == g.long_every - 1 { g.long_ops } else { rng.gen_range(10..=120) };
    let sync_pct = (seed % 6) as u32 * 20;
    let files = rng.gen_range(1..=g.max_files);
    let spans: Vec<u64> = (0..files).map(|_| rng.gen_range(1..=g.max_pages) * PS).collect();
    let tiny = g.tiny_nvm || seed % 11 == 5;
    let cfg = Config {
        nvm_size_pages: if tiny { rng.gen_range(28..=40) } else { 2048 },
        pmem_mode: if seed % 7 == 3 { PmemMode::Eadr } else { PmemMode::Adr },
        nvm_store_latency_ns: 0,
        sensitivity: rng.gen_range(1..=3),
        actsync_scope: if seed % 5 == 2 { ActsyncScope::Global } else { ActsyncScope::File },
        writeback_batch: rng.gen_range(1..=8),
        page_pool_batch: 4,
        record_reserve_pages: 4,
        cache_cap_pages: if seed % 9 == 4 { 8 } else { 0 },
        latency_mode: LatencyMode::Off,
        ..Config::default()
    };
    let mut ops = Vec::with_capacity(n_ops);
    let synced = |rng: &mut ChaCha8Rng| rng.gen_range(0..100) < sync_pct;
    while ops.len() < n_ops {
        let ino = rng.gen_range(1..=files);
        let span = spans[ino as usize - 1];
        let op = match rng.gen_range(0..100) {
            0..=49 => {
                let (offset, len) = pick_extent(&mut rng, span);
                let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
                if synced(&mut rng) {
                    Op::SyncWrite { ino, offset, data }
                } else {
                    Op::Write { ino, offset, data }
                }
            }
            50..=59 if synced(&mut rng) => Op::Fsync(ino),
            60..=66 if synced(&mut rng) => Op::Fdatasync(ino),
            67..=70 if synced(&mut rng) => Op::SetOSync(ino, rng.gen_bool(0.4)),
            71..=82 => Op::Tick,
            83..=86 => Op::Gc,
            _ => {
                let (offset, len) = pick_extent(&mut rng, span);
                Op::Read { ino, offset, len: len as usize }
            }
        };
        ops.push(op);
    }
    Workload { seed, cfg, sync_pct, ops }
}

#[derive(Debug, Clone, Copy)]
pub struct CrashOptions {
    /// Enumerate every subset when at most this many lines are pending.
    pub exhaustive_lines: usize,
    /// Random-subset images per crash point otherwise (plus drop-all).
    pub random_images: usize,
    pub read_checks: bool,
    pub max_failures: usize,
}

impl Default for CrashOptions {
    fn default() -> Self {
        CrashOptions { exhaustive_lines: 4, random_images: 16, read_checks: true, max_failures: 5 }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CrashReport {
    pub workloads: u64,
    pub ops: u64,
    pub crash_points: u64,
    pub images: u64,
    pub mismatches: u64,
    pub recovery_errors: u64,
    pub atomicity_checked: u64,
    pub multi_segment_txns: u64,
    pub atomicity_violations: u64,
    pub read_checks: u64,
    pub read_mismatches: u64,
    pub oracle_errors: u64,
    pub engine_errors: u64,
    pub gc_passes: u64,
    pub gc_pages_freed: u64,
    pub fallback_syncs: u64,
    pub fallback_resumes: u64,
    pub logged_txns: u64,
    pub failures: Vec<String>,
}

impl CrashReport {
    pub fn violations(&self) -> u64 {
        self.mismatches
            + self.recovery_errors
            + self.atomicity_violations
            + self.read_mismatches
            + self.oracle_errors
            + self.engine_errors
    }

    pub fn passed(&self) -> bool {
        self.violations() == 0
    }

    pub fn merge(&mut self, o: &CrashReport, max_failures: usize) {
        self.workloads += o.workloads;
        self.ops += o.ops;
        self.crash_points += o.crash_points;
        self.images += o.images;
        self.mismatches += o.mismatches;
        self.recovery_errors += o.recovery_errors;
        self.atomicity_checked += o.atomicity_checked;
        self.multi_segment_txns += o.multi_segment_txns;
        self.atomicity_violations += o.atomicity_violations;
        self.read_checks += o.read_checks;
        self.read_mismatches += o.read_mismatches;
        self.oracle_errors += o.oracle_errors;
        self.engine_errors += o.engine_errors;
        self.gc_passes += o.gc_passes;
        self.gc_pages_freed += o.gc_pages_freed;
        self.fallback_syncs += o.fallback_syncs;
        self.fallback_resumes += o.fallback_resumes;
        self.logged_txns += o.logged_txns;
        for f in &o.failures {
            if self.failures.len() < max_failures {
                self.failures.push(f.clone());
            }
        }
    }

    fn fail(&mut self, max: usize, msg: impl FnOnce() -> String) {
        if self.failures.len() < max {
            self.failures.push(msg());
        }
    }
}

impl fmt::Display for CrashReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "workloads={} ops={} crash_points={} images={} logged_txns={} multi_segment_txns={} gc_passes={} fallback_syncs={} fallback_resumes={}",
            self.workloads,
            self.ops,
            self.crash_points,
            self.images,
            self.logged_txns,
            self.multi_segment_txns,
            self.gc_passes,
            self.fallback_syncs,
            self.fallback_resumes
        )?;
        write!(
            f,
            "mismatches={} recovery_errors={} atomicity_violations={} read_mismatches={} oracle_errors={} engine_errors={}",
            self.mismatches,
            self.recovery_errors,
            self.atomicity_violations,
            self.read_mismatches,
            self.oracle_errors,
            self.engine_errors
        )?;
        for x in &self.failures {
            write!(f, "\n  {x}")?;
        }
        Ok(())
    }
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ c.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Harness {
    oracle: Oracle,
    sink: Arc<TraceSink>,
    disk: Arc<Disk>,
    /// Entries per logged transaction, from the trace.
    expected: HashMap<u64, u32>,
    /// Transactions below this tid may have lost pages to the collector.
    atomic_floor: u64,
    seed: u64,
    opts: CrashOptions,
    ropts: RecoverOptions,
    cache: VerifyCache,
    report: CrashReport,
    where_: String,
}

impl Harness {
    fn sync_oracle(&mut self) {
        for rec in self.sink.since(self.oracle.applied()) {
            if let TraceEvent::SyncCommit { tid, entries, path: CommitPath::Logged, .. } = rec.event {
                self.expected.insert(tid, entries);
                if entries > 1 {
                    self.report.multi_segment_txns += 1;
                }
            }
            if let Err(e) = self.oracle.apply(&rec) {
                self.report.oracle_errors += 1;
                let (seed, w) = (self.seed, &self.where_);
                self.report.fail(self.opts.max_failures, || format!("seed {seed} {w}: oracle: {e}"));
            }
        }
    }

    fn check(&mut self, view: &CrashView<'_>) {
        self.sync_oracle();
        let fence = view.fence_count();
        let disk = self.disk.snapshot();
        let pending = view.pending_lines().len();
        let images: Vec<_> = if pending <= self.opts.exhaustive_lines {
            vec![view.images(CrashPolicy::EnumerateSubsets { cap: 1 << self.opts.exhaustive_lines, seed: self.seed })]
        } else {
            std::iter::once(view.images(CrashPolicy::DropAllUnfenced))
                .chain((0..self.opts.random_images as u64).map(|i| {
                    view.images(CrashPolicy::RandomSubset { seed: mix(self.seed, fence, i) })
                }))
                .collect()
        };
        self.report.crash_points += 1;
        let Harness { oracle, cache, report, expected, atomic_floor, opts, ropts, seed, where_, .. } = self;
        let pred = oracle.predict(Some(fence));
        for mut img in images.into_iter().flatten() {
            report.images += 1;
            let mut d = disk.clone();
            match recover(&mut img, &mut d, *ropts) {
                Ok(rep) => {
                    if let Err(m) = pred.verify(&d, cache) {
                        report.mismatches += 1;
                        report.fail(opts.max_failures, || format!("seed {seed} fence {fence} {where_}: {m}"));
                    }
                    for (&tid, &n) in rep.entries_by_tid.range(*atomic_floor..) {
                        let Some(&want) = expected.get(&tid) else { continue };
                        report.atomicity_checked += 1;
                        if n != want {
                            report.atomicity_violations += 1;
                            report.fail(opts.max_failures, || {
                                format!("seed {seed} fence {fence}: tid {tid} recovered {n} of {want} entries")
                            });
                        }
                    }
                }
                Err(e) => {
                    report.recovery_errors += 1;
                    report.fail(opts.max_failures, || format!("seed {seed} fence {fence} {where_}: recovery: {e}"));
                }
            }
        }
    }
}

/// Runs one workload with crash checks at every fence.
pub fn run_workload(w: &Workload, mutation: Mutation, opts: &CrashOptions) -> Result<CrashReport> {
    let eng = Engine::new(w.cfg.clone())?;
    let sink = Arc::new(TraceSink::new());
    eng.set_trace(Some(sink.clone()));
    match mutation {
        Mutation::DropCommitFence => eng.store().set_drop_commit_fence(true),
        Mutation::SkipWbRecord => eng.set_skip_wb_record(true),
        _ => {}
    }
    let h = Arc::new(Mutex::new(Harness {
        oracle: Oracle::new(),
        sink,
        disk: eng.disk().clone(),
        expected: HashMap::new(),
        atomic_floor: 0,
        seed: w.seed,
        opts: *opts,
        ropts: RecoverOptions { no_expiry: mutation == Mutation::NoExpiry },
        cache: VerifyCache::default(),
        report: CrashReport { workloads: 1, ..Default::default() },
        where_: String::new(),
    }));
    let hook = h.clone();
    eng.device().set_fence_hook(Some(Box::new(move |v| hook.lock().check(v))));
    let mut rng = ChaCha8Rng::seed_from_u64(w.seed ^ 0x5eed);
    for (i, op) in w.ops.iter().enumerate() {
        h.lock().where_ = format!("op {i} {}", op_name(op));
        let res = match op {
            Op::Write { ino, offset, data } => eng.write(*ino, *offset, data).map(drop),
            Op::SyncWrite { ino, offset, data } => eng.pwrite_sync(*ino, *offset, data).map(drop),
            Op::Fsync(ino) => eng.fsync(*ino),
            Op::Fdatasync(ino) => eng.fdatasync(*ino),
            Op::SetOSync(ino, on) => {
                eng.set_o_sync(*ino, *on);
                Ok(())
            }
            Op::Tick => eng.writeback_tick().map(drop),
            Op::Gc => {
                // older transactions may lose whole log pages from here on
                h.lock().atomic_floor = eng.next_tid.load(std::sync::atomic::Ordering::Relaxed);
                let r = eng.gc_pass();
                if let Ok(s) = &r {
                    h.lock().report.gc_pages_freed += s.pages_freed();
                }
                // a crash right after the pass
                eng.device().capture();
                r.map(drop)
            }
            Op::Read { ino, offset, len } => {
                if opts.read_checks {
                    let got = eng.read(*ino, *offset, *len);
                    let mut g = h.lock();
                    g.sync_oracle();
                    g.report.read_checks += 1;
                    let size = g.oracle.visible_size(*ino);
                    let n = size.saturating_sub(*offset).min(*len as u64) as usize;
                    let want = g.oracle.read(*ino, *offset, n);
                    match got {
                        Ok(b) if b == want && eng.size(*ino) == size => {}
                        Ok(_) => {
                            g.report.read_mismatches += 1;
                            let s = w.seed;
                            g.report.fail(opts.max_failures, || format!("seed {s} op {i}: read of ino {ino} at {offset}+{len} differs"));
                        }
                        Err(e) => return Err(e),
                    }
                }
                Ok(())
            }
        };
        if let Err(e) = res {
            let mut g = h.lock();
            g.report.engine_errors += 1;
            let s = w.seed;
            g.report.fail(opts.max_failures, || format!("seed {s} op {i}: engine error: {e}"));
            break;
        }
        // an occasional crash between operations
        if rng.gen_ratio(1, 8) {
            eng.device().capture();
        }
    }
    h.lock().where_ = "end".into();
    eng.device().capture();
    eng.device().set_fence_hook(None);
    let st = eng.stats();
    let mut g = h.lock();
    g.report.ops = w.ops.len() as u64;
    g.report.gc_passes = st.ops.gc_passes;
    g.report.fallback_syncs = st.ops.fallback_syncs;
    g.report.fallback_resumes = st.ops.fallback_resumes;
    g.report.logged_txns = st.ops.logged_txns;
    Ok(std::mem::take(&mut g.report))
}

fn op_name(op: &Op) -> String {
    match op {
        Op::Write { ino, offset, data } => format!("write ino {ino} {offset}+{}", data.len()),
        Op::SyncWrite { ino, offset, data } => format!("sync-write ino {ino} {offset}+{}", data.len()),
        Op::Fsync(ino) => format!("fsync ino {ino}"),
        Op::Fdatasync(ino) => format!("fdatasync ino {ino}"),
        Op::SetOSync(ino, on) => format!("set-o-sync ino {ino} {on}"),
        Op::Tick => "tick".into(),
        Op::Gc => "gc".into(),
        Op::Read { ino, offset, len } => format!("read ino {ino} {offset}+{len}"),
    }
}

/// Runs `n` generated workloads with seeds `seed..seed+n`.
pub fn campaign(n: u64, seed: u64, g: &GenOptions, mutation: Mutation, opts: &CrashOptions) -> Result<CrashReport> {
    let mut total = CrashReport::default();
    for s in seed..seed + n {
        let w = generate(s, g);
        let r = run_workload(&w, mutation, opts)?;
        total.merge(&r, opts.max_failures);
    }
    Ok(total)
}

/// Outcome of the write-back expiry scenario.
#[derive(Debug, Clone, Serialize)]
pub struct ExpiryScenario {
    pub recovered: String,
    pub predicted: String,
    pub disk_before_recovery: String,
}

/// A page is written back between two O_SYNC writes, with an async
/// overwrite in between; then the machine crashes.
///
/// disk "abcdef"; O_SYNC "bcxyz"@1; async "31xy0"@1; write-back (record);
/// O_SYNC "z"@5; crash. Only the second sync must replay.
pub fn expiry_scenario(no_expiry: bool) -> Result<ExpiryScenario> {
    let cfg = Config { nvm_size_pages: 64, latency_mode: LatencyMode::Off, nvm_store_latency_ns: 0, ..Config::default() };
    let eng = Engine::new(cfg)?;
    let sink = Arc::new(TraceSink::new());
    eng.set_trace(Some(sink.clone()));
    let ino = 1;
    eng.write(ino, 0, b"abcdef")?;
    eng.drain()?;
    eng.pwrite_sync(ino, 1, b"bcxyz")?;
    eng.write(ino, 1, b"31xy0")?;
    eng.writeback_page(ino, 0)?;
    eng.pwrite_sync(ino, 5, b"z")?;
    let mut oracle = Oracle::new();
    oracle.apply_all(sink.records().iter()).map_err(|e| crate::error::Error::Trace(e.to_string()))?;
    let pred = oracle.predict(None);
    let predicted = pred.page_images(ino, 0)[0][..6].to_vec();
    let mut image = eng.device().durable_image();
    let mut disk = eng.disk().snapshot();
    let before = disk.page_bytes(ino, 0)[..6].to_vec();
    recover(&mut image, &mut disk, RecoverOptions { no_expiry })?;
    let text = |b: &[u8]| String::from_utf8_lossy(b).into_owned();
    Ok(ExpiryScenario {
        recovered: text(&disk.page_bytes(ino, 0)[..6]),
        predicted: text(&predicted),
        disk_before_recovery: text(&before),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expiry_scenario_matches() {
        let s = expiry_scenario(false).unwrap();
        assert_eq!(s.disk_before_recovery, "a31xy0");
        assert_eq!(s.recovered, "a31xyz");
        assert_eq!(s.predicted, "a31xyz");
        let n = expiry_scenario(true).unwrap();
        assert_eq!(n.recovered, "abcxyz");
    }

    #[test]
    fn generation_is_reproducible() {
        let g = GenOptions::default();
        let a = generate(17, &g);
        let b = generate(17, &g);
        assert_eq!(a.ops, b.ops);
        assert_eq!(a.sync_pct, 100);
        assert_eq!(generate(49, &g).ops.len(), 1000);
    }

    #[test]
    fn small_campaign_passes() {
        let r = campaign(12, 0, &GenOptions::default(), Mutation::None, &CrashOptions::default()).unwrap();
        assert!(r.passed(), "{r}");
        assert!(r.crash_points > 0);
    }
}
