//! Asynchronous write-back, write-back records, garbage collection passes
//! and the background worker.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::cache::PS;
use crate::engine::{Engine, FileHandle};
use crate::error::{Error, Result};
use crate::gc::{collect_log, GcStats};
use crate::log::TxnItem;
use crate::pool::AllocClass;
use crate::trace::TraceEvent;

impl Engine {
    /// Writes one cached page to disk if dirty. The caller holds `wb_lock`.
    ///
    /// The disk write happens outside the file lock. The record floor is
    /// taken together with the page image, so every entry it expires is
    /// contained in what reached disk. The record is appended only after
    /// the disk write returned.
    pub(crate) fn writeback_locked(&self, h: &FileHandle, page_no: u64, sync: bool) -> Result<bool> {
        let (bytes, gen, floor, needs_record, size, log) = {
            let st = h.state.read();
            let Some(p) = st.pages.get(&page_no).filter(|p| p.dirty) else { return Ok(false) };
            (p.bytes.clone(), p.gen, self.next_tid.load(Ordering::Relaxed) - 1, p.last_dirty_tid != 0, st.size, st.log.clone())
        };
        if let Err(e) = self.disk.write_page(h.ino, page_no, &bytes, sync) {
            self.counters.disk_errors.fetch_add(1, Ordering::Relaxed);
            log::warn!("write-back of ino {} page {page_no} failed: {e}", h.ino);
            return Err(Error::Disk(e));
        }
        self.counters.pages_written_back.fetch_add(1, Ordering::Relaxed);
        let offset = page_no * PS;
        self.emit(TraceEvent::WritebackDurable { ino: h.ino, offset, len: PS, size });
        if needs_record && !self.skip_wb_record.load(Ordering::Relaxed) {
            let log = log.expect("a page with log entries has a log");
            let ino = h.ino;
            let sink = self.trace_sink();
            self.store
                .append_txn(&log, 0, &[TxnItem::Record { file_offset: offset, floor }], AllocClass::Record, |fence| {
                    if let Some(t) = sink {
                        t.emit(fence, TraceEvent::WbRecordCommit { ino, offset, tid: floor });
                    }
                })
                .map_err(|e| match e {
                    Error::NvmFull => Error::NvmExhausted { ino, page: page_no },
                    e => e,
                })?;
            self.counters.records_appended.fetch_add(1, Ordering::Relaxed);
        }
        let mut st = h.state.write();
        if let Some(seq) = st.mark_written_back(page_no, gen) {
            self.dirty.lock().remove(seq);
        }
        if let Some(p) = st.pages.get_mut(&page_no) {
            if p.last_dirty_tid <= floor {
                p.last_dirty_tid = 0;
            }
        }
        Ok(true)
    }

    /// Persists the size sidecar. The caller holds `wb_lock`.
    pub(crate) fn write_size_locked(&self, h: &FileHandle, size: u64, sync: bool) -> Result<()> {
        self.disk.write_size(h.ino, size, sync).map_err(Error::Disk)?;
        self.counters.size_writebacks.fetch_add(1, Ordering::Relaxed);
        self.emit(TraceEvent::WritebackDurable { ino: h.ino, offset: 0, len: 0, size });
        let mut st = h.state.write();
        st.disk_size = st.disk_size.max(size);
        st.durable_size = st.durable_size.max(size);
        Ok(())
    }

    /// Writes back one page now. Returns whether it was dirty.
    pub fn writeback_page(&self, ino: u64, page_no: u64) -> Result<bool> {
        let Some(h) = self.existing(ino) else { return Ok(false) };
        let _wb = self.wb_lock.lock();
        self.writeback_locked(&h, page_no, false)
    }

    /// One write-back round: up to `writeback_batch` pages, oldest dirty
    /// first, then sizes that grew since the last metadata write-back.
    /// Returns the number of pages written.
    pub fn writeback_tick(&self) -> Result<usize> {
        let _wb = self.wb_lock.lock();
        let batch = self.dirty.lock().oldest(self.cfg.writeback_batch);
        let mut written = 0;
        for (ino, page_no) in batch {
            let Some(h) = self.existing(ino) else { continue };
            match self.writeback_locked(&h, page_no, false) {
                Ok(w) => written += w as usize,
                // the page stays dirty and is retried on a later tick
                Err(Error::Disk(_)) => {}
                Err(e) => return Err(e),
            }
        }
        let files: Vec<Arc<FileHandle>> = self.files.read().values().cloned().collect();
        for h in files {
            let (size, disk_size) = {
                let st = h.state.read();
                (st.size, st.disk_size)
            };
            if size > disk_size {
                self.write_size_locked(&h, size, false)?;
            }
        }
        self.evict();
        Ok(written)
    }

    /// Ticks until no dirty page remains.
    pub fn drain(&self) -> Result<()> {
        let mut idle = 0;
        while self.dirty_count() > 0 {
            if self.writeback_tick()? == 0 {
                idle += 1;
                if idle > 16 {
                    return Err(Error::Disk(std::io::Error::other("write-back makes no progress")));
                }
            } else {
                idle = 0;
            }
        }
        // sizes only
        self.writeback_tick()?;
        Ok(())
    }

    fn evict(&self) {
        let cap = self.cfg.cache_cap_pages;
        if cap == 0 {
            return;
        }
        let files: Vec<Arc<FileHandle>> = self.files.read().values().cloned().collect();
        let total: usize = files.iter().map(|h| h.state.read().pages.len()).sum();
        if total <= cap {
            return;
        }
        for h in files {
            let mut st = h.state.write();
            let keep = st.pages.len() * cap / total;
            let n = st.evict(keep);
            self.counters.evictions.fetch_add(n as u64, Ordering::Relaxed);
        }
    }

    /// One garbage-collection pass over every inode log. Takes no file or
    /// append lock.
    pub fn gc_pass(&self) -> Result<GcStats> {
        let _g = self.gc_lock.lock();
        let mut stats = GcStats::default();
        for log in self.logs() {
            collect_log(&self.store, &log, &mut stats)?;
        }
        self.counters.gc_passes.fetch_add(1, Ordering::Relaxed);
        self.gc_totals.lock().add(&stats);
        self.maybe_resume();
        Ok(stats)
    }

    /// Starts the write-back and GC workers. They stop when the handle drops.
    pub fn spawn_background(self: &Arc<Self>) -> Background {
        let stop = Arc::new(AtomicBool::new(false));
        let wb = {
            let (e, stop) = (self.clone(), stop.clone());
            let every = Duration::from_millis(self.cfg.writeback_interval_ms.max(1));
            std::thread::spawn(move || {
                run_every(&stop, every, || {
                    if let Err(err) = e.writeback_tick() {
                        log::error!("write-back: {err}");
                    }
                })
            })
        };
        let gc = {
            let (e, stop) = (self.clone(), stop.clone());
            let every = Duration::from_millis(self.cfg.gc_interval_ms.max(1));
            std::thread::spawn(move || {
                run_every(&stop, every, || {
                    if let Err(err) = e.gc_pass() {
                        log::error!("gc: {err}");
                    }
                })
            })
        };
        Background { stop, threads: vec![wb, gc] }
    }
}

fn run_every(stop: &AtomicBool, every: Duration, mut f: impl FnMut()) {
    let mut next = Instant::now() + every;
    while !stop.load(Ordering::Acquire) {
        let now = Instant::now();
        if now >= next {
            f();
            next = now + every;
        }
        std::thread::sleep((next - Instant::now().min(next)).min(Duration::from_millis(5)));
    }
}

pub struct Background {
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl Background {
    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::Release);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Background {
    fn drop(&mut self) {
        self.halt();
    }
}
