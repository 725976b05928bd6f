//! The engine: page cache in front, NVM log beside it, disk behind it.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::{Mutex, RwLock};
use serde::Serialize;

use crate::cache::{page_chunks, CachedPage, DirtyQueue, FileState, PS};
use crate::config::{ActsyncScope, Config};
use crate::disk::{Disk, DiskLatency};
use crate::error::{Error, Result};
use crate::gc::GcStats;
use crate::layout::MetadataPayload;
use crate::log::{read_capacity, scan_super, InodeLog, LogStore, TxnItem};
use crate::pmem::{PmemDevice, PmemRead};
use crate::pool::{AllocClass, PagePool};
use crate::recovery::{recover, RecoverOptions, RecoveryReport};
use crate::sync::{log_segments, ActiveSyncState, SegmentKind};
use crate::trace::{CommitPath, SyncMode, TraceEvent, TraceSink};
use crate::PAGE_SIZE;

#[derive(Debug)]
pub struct FileHandle {
    pub ino: u64,
    pub(crate) state: RwLock<FileState>,
}

#[derive(Debug, Default)]
struct GlobalSync {
    state: ActiveSyncState,
    flag: bool,
    written: u64,
    touched: HashSet<(u64, u64)>,
}

#[derive(Debug, Default)]
struct Fallback {
    since: Option<Instant>,
    seconds: f64,
}

macro_rules! counters {
    ($($name:ident),* $(,)?) => {
        #[derive(Debug, Default)]
        pub(crate) struct Counters { $(pub(crate) $name: AtomicU64,)* }

        /// Cumulative operation counters.
        #[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
        pub struct OpCounts { $(pub $name: u64,)* }

        impl Counters {
            fn snapshot(&self) -> OpCounts {
                OpCounts { $($name: self.$name.load(Ordering::Relaxed),)* }
            }
        }
    };
}

counters!(
    writes,
    bytes_written,
    reads,
    bytes_read,
    cache_hits,
    cache_misses,
    o_sync_writes,
    fsyncs,
    fdatasyncs,
    logged_txns,
    ip_payload_bytes,
    oop_pages_logged,
    meta_entries,
    records_appended,
    fallback_syncs,
    fallback_entries,
    fallback_resumes,
    direct_syncs,
    noop_syncs,
    pages_written_back,
    size_writebacks,
    disk_errors,
    evictions,
    gc_passes,
);

fn bump(c: &AtomicU64, n: u64) {
    c.fetch_add(n, Ordering::Relaxed);
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EngineStats {
    pub ops: OpCounts,
    pub cached_pages: u64,
    pub dirty_pages: u64,
    pub absorbed_pages: u64,
    pub nvm_capacity_pages: u64,
    pub nvm_pages_in_use: u64,
    pub nvm_free_pages: u64,
    pub fallback_active: bool,
    pub fallback_seconds: f64,
    pub gc: GcStats,
}

impl EngineStats {
    pub fn reclaimed_total(&self) -> u64 {
        self.gc.pages_freed()
    }
}

/// Where a sync ended up when it could not (or may not) use the log.
enum DiskSync {
    Range(u64, u64),
    All,
}

pub struct Engine {
    pub(crate) cfg: Config,
    pub(crate) dev: Arc<PmemDevice>,
    pub(crate) store: LogStore,
    pub(crate) disk: Arc<Disk>,
    pub(crate) files: RwLock<HashMap<u64, Arc<FileHandle>>>,
    pub(crate) logs: RwLock<Vec<Arc<InodeLog>>>,
    pub(crate) dirty: Mutex<DirtyQueue>,
    pub(crate) next_tid: AtomicU64,
    global: Mutex<GlobalSync>,
    fallback: Mutex<Fallback>,
    fallback_on: AtomicBool,
    trace: RwLock<Option<Arc<TraceSink>>>,
    pub(crate) skip_wb_record: AtomicBool,
    pub(crate) counters: Counters,
    /// Serializes disk page writes so an older image never lands last.
    pub(crate) wb_lock: Mutex<()>,
    pub(crate) gc_lock: Mutex<()>,
    pub(crate) gc_totals: Mutex<GcStats>,
    clock: AtomicU64,
}

pub fn disk_latency(cfg: &Config) -> DiskLatency {
    DiskLatency { write_us: cfg.disk_latency_us, sync_write_us: cfg.disk_sync_latency_us, mode: cfg.latency_mode }
}

impl Engine {
    /// A fresh engine on an in-memory device and disk.
    pub fn new(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        let dev = Arc::new(
            PmemDevice::new(cfg.nvm_size_pages, cfg.pmem_mode).with_latency(cfg.nvm_store_latency_ns, cfg.latency_mode),
        );
        let disk = Arc::new(Disk::in_memory(disk_latency(&cfg)));
        Self::create(cfg, dev, disk)
    }

    /// Formats `dev` and starts an empty engine on it.
    pub fn create(cfg: Config, dev: Arc<PmemDevice>, disk: Arc<Disk>) -> Result<Self> {
        cfg.validate()?;
        LogStore::format(&dev)?;
        let scan = scan_super(&*dev)?;
        let pool = Arc::new(PagePool::new(dev.capacity_pages(), cfg.page_pool_batch, cfg.record_reserve_pages));
        let store = LogStore::open(dev.clone(), pool, cfg.s_dev, &scan);
        Ok(Self::assemble(cfg, dev, store, disk, 1))
    }

    /// Recovers `dev` onto `disk` and resumes on the result.
    ///
    /// Pages rebuilt from the log are on disk afterwards, so their entries
    /// are expired with a write-back record before any new write can make
    /// the disk copy newer than the log.
    pub fn open(cfg: Config, dev: Arc<PmemDevice>, disk: Arc<Disk>, opts: RecoverOptions) -> Result<(Self, RecoveryReport)> {
        cfg.validate()?;
        let mut image = dev.durable_image();
        read_capacity(&image)?;
        let mut state = disk.snapshot();
        let rep = recover(&mut image, &mut state, opts)?;
        disk.restore(state).map_err(Error::Disk)?;
        dev.reset_to(image);
        let pool = Arc::new(PagePool::from_live(dev.capacity_pages(), cfg.page_pool_batch, cfg.record_reserve_pages, |p| {
            rep.is_live(p)
        }));
        let store = LogStore::open(dev.clone(), pool, cfg.s_dev, &rep.scan);
        let engine = Self::assemble(cfg, dev, store, disk, rep.max_tid + 1);
        for l in &rep.logs {
            let log = engine.store.attach_inode_log(l.ino, l.super_slot, l.head, l.tail, l.cursor);
            let mut st = FileState::new(l.ino, engine.disk.size(l.ino));
            st.log = Some(log.clone());
            engine.logs.write().push(log);
            engine.files.write().insert(l.ino, Arc::new(FileHandle { ino: l.ino, state: RwLock::new(st) }));
        }
        for (&ino, pages) in &rep.replayed {
            let h = engine.handle(ino);
            let log = h.state.read().log.clone().expect("replayed file has a log");
            let items: Vec<TxnItem> =
                pages.iter().map(|&p| TxnItem::Record { file_offset: p * PS, floor: rep.max_tid }).collect();
            engine.store.append_txn(&log, 0, &items, AllocClass::Record, |_| {})?;
            bump(&engine.counters.records_appended, items.len() as u64);
        }
        Ok((engine, rep))
    }

    fn assemble(cfg: Config, dev: Arc<PmemDevice>, store: LogStore, disk: Arc<Disk>, next_tid: u64) -> Self {
        Engine {
            cfg,
            dev,
            store,
            disk,
            files: RwLock::default(),
            logs: RwLock::default(),
            dirty: Mutex::default(),
            next_tid: AtomicU64::new(next_tid),
            global: Mutex::default(),
            fallback: Mutex::default(),
            fallback_on: AtomicBool::new(false),
            trace: RwLock::new(None),
            skip_wb_record: AtomicBool::new(false),
            counters: Counters::default(),
            wb_lock: Mutex::new(()),
            gc_lock: Mutex::new(()),
            gc_totals: Mutex::default(),
            clock: AtomicU64::new(1),
        }
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn device(&self) -> &Arc<PmemDevice> {
        &self.dev
    }

    pub fn disk(&self) -> &Arc<Disk> {
        &self.disk
    }

    pub fn store(&self) -> &LogStore {
        &self.store
    }

    pub fn pool(&self) -> &Arc<PagePool> {
        self.store.pool()
    }

    pub fn set_trace(&self, sink: Option<Arc<TraceSink>>) {
        *self.trace.write() = sink;
    }

    /// Test hook: skip write-back records while still treating the page as
    /// expired.
    pub fn set_skip_wb_record(&self, on: bool) {
        self.skip_wb_record.store(on, Ordering::Relaxed);
    }

    /// Inode logs created so far.
    pub fn logs(&self) -> Vec<Arc<InodeLog>> {
        self.logs.read().clone()
    }

    pub fn inodes(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.files.read().keys().copied().collect();
        v.sort_unstable();
        v
    }

    pub(crate) fn emit(&self, event: TraceEvent) {
        self.emit_with(|| event);
    }

    /// Builds the event only when a sink is installed.
    pub(crate) fn emit_with(&self, event: impl FnOnce() -> TraceEvent) {
        if let Some(t) = self.trace.read().as_ref() {
            t.emit(self.dev.fence_count(), event());
        }
    }

    pub(crate) fn trace_sink(&self) -> Option<Arc<TraceSink>> {
        self.trace.read().clone()
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::Relaxed)
    }

    pub(crate) fn handle(&self, ino: u64) -> Arc<FileHandle> {
        if let Some(h) = self.files.read().get(&ino) {
            return h.clone();
        }
        let disk_size = self.disk.size(ino);
        self.files
            .write()
            .entry(ino)
            .or_insert_with(|| Arc::new(FileHandle { ino, state: RwLock::new(FileState::new(ino, disk_size)) }))
            .clone()
    }

    pub(crate) fn existing(&self, ino: u64) -> Option<Arc<FileHandle>> {
        self.files.read().get(&ino).cloned()
    }

    pub fn size(&self, ino: u64) -> u64 {
        self.handle(ino).state.read().size
    }

    pub fn set_o_sync(&self, ino: u64, on: bool) {
        self.handle(ino).state.write().o_sync_user = on;
    }

    /// The effective O_SYNC flag: user-set or predicted.
    pub fn o_sync(&self, ino: u64) -> bool {
        let h = self.handle(ino);
        let st = h.state.read();
        st.o_sync_user || self.predicted(&st)
    }

    fn predicted(&self, st: &FileState) -> bool {
        match self.cfg.actsync_scope {
            ActsyncScope::File => st.o_sync_active,
            ActsyncScope::Global => self.global.lock().flag,
        }
    }

    pub fn fallback_active(&self) -> bool {
        self.fallback_on.load(Ordering::Acquire)
    }

    fn enter_fallback(&self) {
        let mut f = self.fallback.lock();
        if f.since.is_none() {
            log::warn!("NVM full: syncing to disk until pages are freed");
            f.since = Some(Instant::now());
            self.fallback_on.store(true, Ordering::Release);
            bump(&self.counters.fallback_entries, 1);
        }
    }

    /// Leaves fallback mode once any page is free again.
    pub(crate) fn maybe_resume(&self) {
        if !self.fallback_active() || self.store.pool().normal_free_pages() == 0 {
            return;
        }
        let mut f = self.fallback.lock();
        if let Some(t) = f.since.take() {
            f.seconds += t.elapsed().as_secs_f64();
            self.fallback_on.store(false, Ordering::Release);
            bump(&self.counters.fallback_resumes, 1);
            log::info!("NVM pages available again: resuming the log path");
        }
    }

    /// Reads `len` bytes at `offset`, short at end of file. Never touches NVM.
    pub fn read(&self, ino: u64, offset: u64, len: usize) -> Result<Vec<u8>> {
        let h = self.handle(ino);
        bump(&self.counters.reads, 1);
        {
            let st = h.state.read();
            let len = (st.size.saturating_sub(offset)).min(len as u64);
            let chunks = page_chunks(offset, len);
            if chunks.iter().all(|c| st.pages.contains_key(&c.0)) {
                let mut out = vec![0u8; len as usize];
                for (p, off, n, dst) in chunks {
                    out[dst..dst + n].copy_from_slice(&st.pages[&p].bytes[off..off + n]);
                }
                bump(&self.counters.cache_hits, 1);
                bump(&self.counters.bytes_read, len);
                return Ok(out);
            }
        }
        let mut st = h.state.write();
        let len = (st.size.saturating_sub(offset)).min(len as u64);
        let mut out = vec![0u8; len as usize];
        let now = self.tick();
        let mut missed = false;
        for (p, off, n, dst) in page_chunks(offset, len) {
            let page = st.pages.entry(p).or_insert_with(|| {
                missed = true;
                CachedPage::clean(self.disk.read_page(ino, p).unwrap_or_else(|| Arc::new([0; PAGE_SIZE])))
            });
            page.last_access = now;
            out[dst..dst + n].copy_from_slice(&page.bytes[off..off + n]);
        }
        bump(if missed { &self.counters.cache_misses } else { &self.counters.cache_hits }, 1);
        bump(&self.counters.bytes_read, len);
        Ok(out)
    }

    pub fn write(&self, ino: u64, offset: u64, data: &[u8]) -> Result<usize> {
        self.write_inner(ino, offset, data, false)
    }

    /// A write that is synchronous on its own, whatever the file flags.
    pub fn pwrite_sync(&self, ino: u64, offset: u64, data: &[u8]) -> Result<usize> {
        self.write_inner(ino, offset, data, true)
    }

    fn write_inner(&self, ino: u64, offset: u64, data: &[u8], sync_this: bool) -> Result<usize> {
        if data.is_empty() {
            return Ok(0);
        }
        let h = self.handle(ino);
        let mut st = h.state.write();
        let now = self.tick();
        let len = data.len() as u64;
        let mut covered = Vec::new();
        for (p, off, n, src) in page_chunks(offset, len) {
            let page = match st.pages.entry(p) {
                std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::btree_map::Entry::Vacant(e) => {
                    // a whole-page overwrite needs nothing from disk
                    let base = if n < PAGE_SIZE { self.disk.read_page(ino, p) } else { None };
                    e.insert(CachedPage::clean(base.unwrap_or_else(|| Arc::new([0; PAGE_SIZE]))))
                }
            };
            let was_covered = !page.dirty || page.absorbed;
            Arc::make_mut(&mut page.bytes)[off..off + n].copy_from_slice(&data[src..src + n]);
            page.absorbed = false;
            page.gen += 1;
            page.last_access = now;
            if !page.dirty {
                page.dirty = true;
                page.dirty_seq = Some(self.dirty.lock().push(ino, p));
            }
            st.touched.insert(p);
            covered.push((p, was_covered));
        }
        st.written_bytes += len;
        st.size = st.size.max(offset + len);
        st.mtime = now;
        st.ctime = now;
        bump(&self.counters.writes, 1);
        bump(&self.counters.bytes_written, len);
        self.emit_with(|| TraceEvent::Write { ino, offset, len, data: data.to_vec() });
        self.clear_sync(&mut st, len);
        if !(sync_this || st.o_sync_user || self.predicted(&st)) {
            return Ok(data.len());
        }
        bump(&self.counters.o_sync_writes, 1);
        let logged = self.log_o_sync(&mut st, offset, data, &covered)?;
        self.mark_sync(&mut st);
        drop(st);
        if let Some(path) = logged {
            self.sync_to_disk(&h, SyncMode::OSync, DiskSync::Range(offset, len), path)?;
        }
        Ok(data.len())
    }

    fn clear_sync(&self, st: &mut FileState, len: u64) {
        let sens = self.cfg.sensitivity;
        match self.cfg.actsync_scope {
            ActsyncScope::File => {
                let (wb, dp) = (st.written_bytes, st.dirty_pages());
                let FileState { actsync, o_sync_active, .. } = st;
                actsync.clear_sync(o_sync_active, wb, dp, sens);
            }
            ActsyncScope::Global => {
                let mut g = self.global.lock();
                g.written += len;
                let ino = st.ino;
                g.touched.extend(st.touched.iter().map(|&p| (ino, p)));
                let (wb, dp) = (g.written, g.touched.len() as u64);
                let GlobalSync { state, flag, .. } = &mut *g;
                state.clear_sync(flag, wb, dp, sens);
            }
        }
    }

    /// Evaluates the predictor with the counters since the previous sync,
    /// then resets them.
    fn mark_sync(&self, st: &mut FileState) {
        let sens = self.cfg.sensitivity;
        match self.cfg.actsync_scope {
            ActsyncScope::File => {
                let (wb, dp) = (st.written_bytes, st.dirty_pages());
                let FileState { actsync, o_sync_active, .. } = st;
                actsync.mark_sync(o_sync_active, wb, dp, sens);
            }
            ActsyncScope::Global => {
                let mut g = self.global.lock();
                let (wb, dp) = (g.written, g.touched.len() as u64);
                let GlobalSync { state, flag, .. } = &mut *g;
                state.mark_sync(flag, wb, dp, sens);
                g.written = 0;
                g.touched.clear();
            }
        }
        st.reset_counters();
    }

    /// The log path is closed: disabled, or waiting for free pages.
    fn disk_path(&self) -> Option<CommitPath> {
        if !self.cfg.nvlog_enabled {
            return Some(CommitPath::Direct);
        }
        self.maybe_resume();
        self.fallback_active().then_some(CommitPath::Fallback)
    }

    fn ensure_log(&self, st: &mut FileState) -> Result<Arc<InodeLog>> {
        if let Some(l) = &st.log {
            return Ok(l.clone());
        }
        let log = self.store.create_inode_log(st.ino, AllocClass::Normal)?;
        self.logs.write().push(log.clone());
        st.log = Some(log.clone());
        Ok(log)
    }

    fn meta(st: &FileState) -> MetadataPayload {
        MetadataPayload { new_size: st.size, mtime_ns: st.mtime, ctime_ns: st.ctime }
    }

    /// Logs one O_SYNC write as a transaction. Returns the disk path to take
    /// instead when the log cannot be used.
    fn log_o_sync(
        &self,
        st: &mut FileState,
        offset: u64,
        data: &[u8],
        covered: &[(u64, bool)],
    ) -> Result<Option<CommitPath>> {
        if let Some(path) = self.disk_path() {
            return Ok(Some(path));
        }
        let log = match self.ensure_log(st) {
            Ok(l) => l,
            Err(Error::NvmFull) => {
                self.enter_fallback();
                return Ok(Some(CommitPath::Fallback));
            }
            Err(e) => return Err(e),
        };
        let mut items: Vec<TxnItem> = log_segments(offset, data.len() as u64)
            .into_iter()
            .map(|s| {
                let src = &data[(s.file_offset - offset) as usize..][..s.len as usize];
                match s.kind {
                    SegmentKind::Ip => TxnItem::Ip { file_offset: s.file_offset, data: src },
                    SegmentKind::Oop => TxnItem::Oop { file_offset: s.file_offset, page: src },
                }
            })
            .collect();
        items.push(TxnItem::Meta(Self::meta(st)));
        let tid = self.next_tid.fetch_add(1, Ordering::Relaxed);
        let (ino, size, entries) = (st.ino, st.size, items.len() as u32);
        let len = data.len() as u64;
        let sink = self.trace_sink();
        let res = self.store.append_txn(&log, tid, &items, AllocClass::Normal, |fence| {
            if let Some(t) = sink {
                t.emit(
                    fence,
                    TraceEvent::SyncCommit { ino, tid, mode: SyncMode::OSync, path: CommitPath::Logged, offset, len, size, entries, pages: vec![] },
                );
            }
        });
        match res {
            Ok(info) => {
                bump(&self.counters.logged_txns, 1);
                bump(&self.counters.ip_payload_bytes, info.ip_payload_bytes);
                bump(&self.counters.oop_pages_logged, info.oop_pages);
                bump(&self.counters.meta_entries, 1);
                for &(p, was_covered) in covered {
                    let page = st.pages.get_mut(&p).expect("written page is cached");
                    page.absorbed |= was_covered;
                    page.last_dirty_tid = tid;
                }
                st.durable_size = st.durable_size.max(size);
                Ok(None)
            }
            Err(Error::NvmFull) => {
                self.enter_fallback();
                Ok(Some(CommitPath::Fallback))
            }
            Err(e) => Err(e),
        }
    }

    pub fn fsync(&self, ino: u64) -> Result<()> {
        self.sync_file(ino, SyncMode::Fsync)
    }

    pub fn fdatasync(&self, ino: u64) -> Result<()> {
        self.sync_file(ino, SyncMode::Fdatasync)
    }

    fn sync_file(&self, ino: u64, mode: SyncMode) -> Result<()> {
        let h = self.handle(ino);
        let mut st = h.state.write();
        bump(if mode == SyncMode::Fsync { &self.counters.fsyncs } else { &self.counters.fdatasyncs }, 1);
        let path = self.log_file(&mut st, mode)?;
        self.mark_sync(&mut st);
        drop(st);
        if let Some(path) = path {
            self.sync_to_disk(&h, mode, DiskSync::All, path)?;
        }
        Ok(())
    }

    /// One OOP entry per dirty page the log does not hold yet, plus the
    /// metadata entry when needed.
    fn log_file(&self, st: &mut FileState, mode: SyncMode) -> Result<Option<CommitPath>> {
        if let Some(path) = self.disk_path() {
            return Ok(Some(path));
        }
        let pages = st.collect_dirty();
        let with_meta = mode == SyncMode::Fsync || st.size > st.durable_size;
        let (ino, size) = (st.ino, st.size);
        if pages.is_empty() && !with_meta {
            bump(&self.counters.noop_syncs, 1);
            self.emit(TraceEvent::SyncCommit { ino, tid: 0, mode, path: CommitPath::Noop, offset: 0, len: 0, size, entries: 0, pages: vec![] });
            return Ok(None);
        }
        let log = match self.ensure_log(st) {
            Ok(l) => l,
            Err(Error::NvmFull) => {
                self.enter_fallback();
                return Ok(Some(CommitPath::Fallback));
            }
            Err(e) => return Err(e),
        };
        let images: Vec<Arc<crate::pmem::Page>> = pages.iter().map(|p| st.pages[p].bytes.clone()).collect();
        let mut items: Vec<TxnItem> = pages
            .iter()
            .zip(&images)
            .map(|(&p, b)| TxnItem::Oop { file_offset: p * PS, page: &b[..] })
            .collect();
        if with_meta {
            items.push(TxnItem::Meta(Self::meta(st)));
        }
        let tid = self.next_tid.fetch_add(1, Ordering::Relaxed);
        let entries = items.len() as u32;
        let sink = self.trace_sink();
        let res = self.store.append_txn(&log, tid, &items, AllocClass::Normal, |fence| {
            if let Some(t) = sink {
                let pages = pages.clone();
                t.emit(fence, TraceEvent::SyncCommit { ino, tid, mode, path: CommitPath::Logged, offset: 0, len: 0, size, entries, pages });
            }
        });
        match res {
            Ok(info) => {
                bump(&self.counters.logged_txns, 1);
                bump(&self.counters.oop_pages_logged, info.oop_pages);
                bump(&self.counters.meta_entries, with_meta as u64);
                for p in &pages {
                    let page = st.pages.get_mut(p).expect("dirty page is cached");
                    page.absorbed = true;
                    page.last_dirty_tid = tid;
                }
                if with_meta {
                    st.durable_size = st.durable_size.max(size);
                }
                Ok(None)
            }
            Err(Error::NvmFull) => {
                self.enter_fallback();
                Ok(Some(CommitPath::Fallback))
            }
            Err(e) => Err(e),
        }
    }

    /// The sync-to-disk path: dirty pages in scope are written back
    /// synchronously (with records where the log holds older entries), then
    /// the size sidecar.
    fn sync_to_disk(&self, h: &FileHandle, mode: SyncMode, scope: DiskSync, path: CommitPath) -> Result<()> {
        let _wb = self.wb_lock.lock();
        let pages: Vec<u64> = {
            let st = h.state.read();
            match scope {
                DiskSync::Range(off, len) => {
                    page_chunks(off, len).into_iter().map(|c| c.0).filter(|p| st.pages.get(p).is_some_and(|pg| pg.dirty)).collect()
                }
                DiskSync::All => st.pages.iter().filter(|(_, pg)| pg.dirty).map(|(&p, _)| p).collect(),
            }
        };
        for p in pages {
            self.writeback_locked(h, p, true)?;
        }
        let (size, durable) = {
            let st = h.state.read();
            (st.size, st.durable_size)
        };
        if mode != SyncMode::Fdatasync || size > durable {
            self.write_size_locked(h, size, true)?;
        }
        bump(if path == CommitPath::Direct { &self.counters.direct_syncs } else { &self.counters.fallback_syncs }, 1);
        self.emit(TraceEvent::SyncCommit { ino: h.ino, tid: 0, mode, path, offset: 0, len: 0, size, entries: 0, pages: vec![] });
        Ok(())
    }

    pub fn stats(&self) -> EngineStats {
        let (mut cached, mut dirty, mut absorbed) = (0u64, 0u64, 0u64);
        for h in self.files.read().values() {
            let st = h.state.read();
            cached += st.pages.len() as u64;
            dirty += st.dirty_count() as u64;
            absorbed += st.absorbed_count() as u64;
        }
        let pool = self.store.pool();
        let fb = self.fallback.lock();
        let fallback_seconds = fb.seconds + fb.since.map_or(0.0, |t| t.elapsed().as_secs_f64());
        EngineStats {
            ops: self.counters.snapshot(),
            cached_pages: cached,
            dirty_pages: dirty,
            absorbed_pages: absorbed,
            nvm_capacity_pages: pool.capacity() as u64,
            nvm_pages_in_use: pool.pages_in_use(),
            nvm_free_pages: pool.free_pages(),
            fallback_active: fb.since.is_some(),
            fallback_seconds,
            gc: *self.gc_totals.lock(),
        }
    }

    pub fn dirty_count(&self) -> usize {
        self.dirty.lock().len()
    }

    /// Writes everything back and persists the device image if file-backed.
    pub fn shutdown(&self) -> Result<()> {
        self.drain()?;
        self.dev.save()?;
        Ok(())
    }
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("files", &self.files.read().len()).finish_non_exhaustive()
    }
}
