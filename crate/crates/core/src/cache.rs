//! Volatile page cache: per-file page maps with dirty/absorbed flags and the
//! per-sync counters the active-sync predictor reads.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use crate::log::InodeLog;
use crate::pmem::Page;
use crate::sync::ActiveSyncState;
use crate::PAGE_SIZE;

pub(crate) const PS: u64 = PAGE_SIZE as u64;

#[derive(Debug, Clone)]
pub struct CachedPage {
    pub bytes: Arc<Page>,
    pub dirty: bool,
    /// Every change since the page was last clean is in the NVM log.
    pub absorbed: bool,
    /// Tid of the newest log entry that may still replay onto this page;
    /// 0 when no unexpired entry exists.
    pub last_dirty_tid: u64,
    /// Bumped on every modification; write-back uses it to detect races.
    pub gen: u64,
    /// Position in the engine's oldest-dirty-first queue.
    pub dirty_seq: Option<u64>,
    pub last_access: u64,
}

impl CachedPage {
    pub fn clean(bytes: Arc<Page>) -> Self {
        CachedPage { bytes, dirty: false, absorbed: false, last_dirty_tid: 0, gen: 0, dirty_seq: None, last_access: 0 }
    }
}

#[derive(Debug, Default)]
pub struct FileState {
    pub ino: u64,
    pub size: u64,
    /// Largest size that survives a crash (logged or on disk).
    pub durable_size: u64,
    /// Size held by the disk sidecar.
    pub disk_size: u64,
    pub mtime: u64,
    pub ctime: u64,
    /// User-requested O_SYNC.
    pub o_sync_user: bool,
    /// O_SYNC set by the active-sync predictor (per-file scope).
    pub o_sync_active: bool,
    pub actsync: ActiveSyncState,
    pub written_bytes: u64,
    pub touched: HashSet<u64>,
    pub pages: BTreeMap<u64, CachedPage>,
    pub log: Option<Arc<InodeLog>>,
}

impl FileState {
    pub fn new(ino: u64, disk_size: u64) -> Self {
        FileState { ino, size: disk_size, durable_size: disk_size, disk_size, ..Default::default() }
    }

    pub fn dirty_pages(&self) -> u64 {
        self.touched.len() as u64
    }

    pub fn reset_counters(&mut self) {
        self.written_bytes = 0;
        self.touched.clear();
    }

    /// Dirty pages not yet absorbed by the log, ascending.
    pub fn collect_dirty(&self) -> Vec<u64> {
        self.pages.iter().filter(|(_, p)| p.dirty && !p.absorbed).map(|(&n, _)| n).collect()
    }

    pub fn dirty_count(&self) -> usize {
        self.pages.values().filter(|p| p.dirty).count()
    }

    pub fn absorbed_count(&self) -> usize {
        self.pages.values().filter(|p| p.absorbed).count()
    }

    /// Clears the flags after a durable disk write of generation `gen`.
    /// Returns the dirty-queue sequence to drop, if the page became clean.
    pub fn mark_written_back(&mut self, page_no: u64, gen: u64) -> Option<u64> {
        let p = self.pages.get_mut(&page_no)?;
        if !p.dirty || p.gen != gen {
            return None;
        }
        p.dirty = false;
        p.absorbed = false;
        p.dirty_seq.take()
    }

    /// Drops clean pages without live log entries, least recently used
    /// first, until at most `keep` pages remain. Returns how many went.
    pub fn evict(&mut self, keep: usize) -> usize {
        if self.pages.len() <= keep {
            return 0;
        }
        let mut cands: Vec<(u64, u64)> = self
            .pages
            .iter()
            .filter(|(_, p)| !p.dirty && p.last_dirty_tid == 0)
            .map(|(&n, p)| (p.last_access, n))
            .collect();
        cands.sort_unstable();
        let n = (self.pages.len() - keep).min(cands.len());
        for &(_, page) in &cands[..n] {
            self.pages.remove(&page);
        }
        n
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub cached_pages: u64,
    pub dirty_pages: u64,
    pub absorbed_pages: u64,
}

/// Per-page pieces of a byte range: (page, offset in page, length, offset in
/// the source buffer).
pub fn page_chunks(offset: u64, len: u64) -> Vec<(u64, usize, usize, usize)> {
    let mut out = Vec::new();
    let end = offset + len;
    let mut pos = offset;
    while pos < end {
        let off = (pos % PS) as usize;
        let n = (PS - off as u64).min(end - pos) as usize;
        out.push((pos / PS, off, n, (pos - offset) as usize));
        pos += n as u64;
    }
    out
}

/// Oldest-dirty-first queue shared by all files.
#[derive(Debug, Default)]
pub struct DirtyQueue {
    next: u64,
    q: BTreeMap<u64, (u64, u64)>,
}

impl DirtyQueue {
    pub fn push(&mut self, ino: u64, page: u64) -> u64 {
        let seq = self.next;
        self.next += 1;
        self.q.insert(seq, (ino, page));
        seq
    }

    pub fn remove(&mut self, seq: u64) {
        self.q.remove(&seq);
    }

    pub fn oldest(&self, n: usize) -> Vec<(u64, u64)> {
        self.q.values().take(n).copied().collect()
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn page(dirty: bool, absorbed: bool) -> CachedPage {
        CachedPage { dirty, absorbed, ..CachedPage::clean(Arc::new([0; PAGE_SIZE])) }
    }

    #[test]
    fn collect_dirty_skips_absorbed_and_clean() {
        let mut f = FileState::new(1, 0);
        assert!(f.collect_dirty().is_empty());
        f.pages.insert(0, page(true, false));
        f.pages.insert(1, page(true, true));
        f.pages.insert(2, page(false, false));
        f.pages.insert(5, page(true, false));
        assert_eq!(f.collect_dirty(), vec![0, 5]);
    }

    #[test]
    fn mark_written_back_respects_generation() {
        let mut f = FileState::new(1, 0);
        f.pages.insert(0, CachedPage { gen: 3, dirty_seq: Some(9), ..page(true, true) });
        assert_eq!(f.mark_written_back(0, 2), None);
        assert!(f.pages[&0].dirty);
        assert_eq!(f.mark_written_back(0, 3), Some(9));
        assert!(!f.pages[&0].dirty && !f.pages[&0].absorbed);
        // clean page: no-op
        assert_eq!(f.mark_written_back(0, 3), None);
    }

    #[test]
    fn chunks_split_at_boundaries() {
        assert_eq!(page_chunks(4000, 200), vec![(0, 4000, 96, 0), (1, 0, 104, 96)]);
        assert_eq!(page_chunks(0, 8192).len(), 2);
    }

    #[test]
    fn eviction_keeps_dirty_and_logged_pages() {
        let mut f = FileState::new(1, 0);
        for n in 0..4 {
            f.pages.insert(n, CachedPage { last_access: 10 - n, ..page(false, false) });
        }
        f.pages.insert(4, page(true, false));
        f.pages.insert(5, CachedPage { last_dirty_tid: 7, ..page(false, false) });
        assert_eq!(f.evict(3), 3);
        assert!(f.pages.contains_key(&0) && f.pages.contains_key(&4) && f.pages.contains_key(&5));
    }

    #[test]
    fn queue_is_oldest_first() {
        let mut q = DirtyQueue::default();
        let a = q.push(1, 0);
        q.push(2, 0);
        q.push(1, 1);
        q.remove(a);
        assert_eq!(q.oldest(2), vec![(2, 0), (1, 1)]);
    }
}
