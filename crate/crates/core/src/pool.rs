//! Volatile NVM page allocator: a global free bitmap fronted by per-thread
//! page caches that refill in batches.
//!
//! Nothing here is persisted. After a crash the bitmap is rebuilt by the
//! reachability scan in [`crate::recovery`].

use std::cell::Cell;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use bitvec::prelude::*;
use parking_lot::Mutex;
use thiserror::Error;

pub const DEFAULT_BATCH: usize = 16;
pub const DEFAULT_SHARDS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("NVM is full")]
pub struct NvmFull;

/// Who is asking. Write-back records may dip into a small reserve so that
/// expiring old entries never deadlocks on a full device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocClass {
    Normal,
    Record,
}

thread_local! {
    static SHARD_HINT: Cell<usize> = const { Cell::new(usize::MAX) };
}
static NEXT_SHARD: AtomicUsize = AtomicUsize::new(0);

fn shard_hint() -> usize {
    SHARD_HINT.with(|h| {
        if h.get() == usize::MAX {
            h.set(NEXT_SHARD.fetch_add(1, Ordering::Relaxed));
        }
        h.get()
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PoolStats {
    pub capacity: u32,
    pub free: u64,
    pub refills: u64,
    pub steals: u64,
    pub allocs: u64,
    pub frees: u64,
    pub full_events: u64,
}

pub struct PagePool {
    capacity: u32,
    batch: usize,
    /// One bit per page, set = free and not cached by any shard.
    global: Mutex<BitVec<u64, Lsb0>>,
    shards: Vec<Mutex<Vec<u32>>>,
    reserve: Mutex<Vec<u32>>,
    reserve_target: usize,
    /// One bit per page, set = allocated. Guards against double frees.
    live: Vec<AtomicU64>,
    free: AtomicU64,
    refills: AtomicU64,
    steals: AtomicU64,
    allocs: AtomicU64,
    frees: AtomicU64,
    full_events: AtomicU64,
}

impl PagePool {
    /// A pool where `is_live(page)` pages are in use. Page 0 is never handed
    /// out.
    pub fn from_live(capacity: u32, batch: usize, reserve: usize, is_live: impl Fn(u32) -> bool) -> Self {
        let mut global = bitvec![u64, Lsb0; 0; capacity as usize];
        let live: Vec<AtomicU64> = (0..(capacity as usize).div_ceil(64)).map(|_| AtomicU64::new(0)).collect();
        let mut free = 0u64;
        for p in 0..capacity {
            if p == 0 || is_live(p) {
                live[p as usize / 64].fetch_or(1 << (p % 64), Ordering::Relaxed);
            } else {
                global.set(p as usize, true);
                free += 1;
            }
        }
        let pool = PagePool {
            capacity,
            batch: batch.max(1),
            global: Mutex::new(global),
            shards: (0..DEFAULT_SHARDS).map(|_| Mutex::new(Vec::new())).collect(),
            reserve: Mutex::new(Vec::new()),
            reserve_target: reserve,
            live,
            free: AtomicU64::new(free),
            refills: AtomicU64::new(0),
            steals: AtomicU64::new(0),
            allocs: AtomicU64::new(0),
            frees: AtomicU64::new(0),
            full_events: AtomicU64::new(0),
        };
        {
            let mut g = pool.global.lock();
            let mut r = pool.reserve.lock();
            while r.len() < reserve {
                match g.first_one() {
                    Some(p) => {
                        g.set(p, false);
                        r.push(p as u32);
                    }
                    None => break,
                }
            }
        }
        pool
    }

    /// An empty device: only page 0 is in use.
    pub fn new(capacity: u32, batch: usize, reserve: usize) -> Self {
        Self::from_live(capacity, batch, reserve, |_| false)
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    /// Pages free anywhere in the pool, including shard caches and reserve.
    pub fn free_pages(&self) -> u64 {
        self.free.load(Ordering::Acquire)
    }

    /// Free pages usable by ordinary allocations.
    pub fn normal_free_pages(&self) -> u64 {
        self.free_pages().saturating_sub(self.reserve.lock().len() as u64)
    }

    pub fn pages_in_use(&self) -> u64 {
        self.capacity as u64 - self.free_pages()
    }

    pub fn is_live(&self, page: u32) -> bool {
        self.live[page as usize / 64].load(Ordering::Acquire) & (1 << (page % 64)) != 0
    }

    fn mark_live(&self, page: u32) {
        let prev = self.live[page as usize / 64].fetch_or(1 << (page % 64), Ordering::AcqRel);
        assert!(prev & (1 << (page % 64)) == 0, "page {page} allocated twice");
    }

    fn my_shard(&self) -> usize {
        shard_hint() % self.shards.len()
    }

    fn refill(&self, into: &mut Vec<u32>) -> bool {
        let mut g = self.global.lock();
        let mut taken = 0;
        while taken < self.batch {
            match g.first_one() {
                Some(p) => {
                    g.set(p, false);
                    into.push(p as u32);
                    taken += 1;
                }
                None => break,
            }
        }
        if taken > 0 {
            self.refills.fetch_add(1, Ordering::Relaxed);
        }
        taken > 0
    }

    pub fn alloc(&self, class: AllocClass) -> Result<u32, NvmFull> {
        let me = self.my_shard();
        let page = {
            let mut shard = self.shards[me].lock();
            if shard.is_empty() {
                self.refill(&mut shard);
            }
            shard.pop()
        };
        let page = page.or_else(|| self.steal(me)).or_else(|| match class {
            AllocClass::Record => self.reserve.lock().pop(),
            AllocClass::Normal => None,
        });
        match page {
            Some(p) => {
                self.mark_live(p);
                self.free.fetch_sub(1, Ordering::AcqRel);
                self.allocs.fetch_add(1, Ordering::Relaxed);
                Ok(p)
            }
            None => {
                self.full_events.fetch_add(1, Ordering::Relaxed);
                Err(NvmFull)
            }
        }
    }

    fn steal(&self, me: usize) -> Option<u32> {
        for (i, s) in self.shards.iter().enumerate() {
            if i == me {
                continue;
            }
            if let Some(p) = s.lock().pop() {
                self.steals.fetch_add(1, Ordering::Relaxed);
                return Some(p);
            }
        }
        None
    }

    /// All-or-nothing allocation of `n` pages.
    pub fn alloc_many(&self, n: usize, class: AllocClass) -> Result<Vec<u32>, NvmFull> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            match self.alloc(class) {
                Ok(p) => out.push(p),
                Err(e) => {
                    for p in out {
                        self.free(p);
                    }
                    return Err(e);
                }
            }
        }
        Ok(out)
    }

    pub fn free(&self, page: u32) {
        assert!(page != 0 && page < self.capacity, "freeing invalid page {page}");
        let prev = self.live[page as usize / 64].fetch_and(!(1 << (page % 64)), Ordering::AcqRel);
        assert!(prev & (1 << (page % 64)) != 0, "double free of page {page}");
        self.frees.fetch_add(1, Ordering::Relaxed);
        {
            let mut r = self.reserve.lock();
            if r.len() < self.reserve_target {
                r.push(page);
                drop(r);
                self.free.fetch_add(1, Ordering::AcqRel);
                return;
            }
        }
        let mut shard = self.shards[self.my_shard()].lock();
        shard.push(page);
        if shard.len() > 2 * self.batch {
            let spill = shard.len() - self.batch;
            let mut g = self.global.lock();
            for p in shard.drain(..spill) {
                g.set(p as usize, true);
            }
        }
        drop(shard);
        self.free.fetch_add(1, Ordering::AcqRel);
    }

    pub fn stats(&self) -> PoolStats {
        PoolStats {
            capacity: self.capacity,
            free: self.free_pages(),
            refills: self.refills.load(Ordering::Relaxed),
            steals: self.steals.load(Ordering::Relaxed),
            allocs: self.allocs.load(Ordering::Relaxed),
            frees: self.frees.load(Ordering::Relaxed),
            full_events: self.full_events.load(Ordering::Relaxed),
        }
    }
}

impl std::fmt::Debug for PagePool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PagePool").field("capacity", &self.capacity).field("free", &self.free_pages()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn refill_takes_a_batch() {
        let pool = PagePool::new(64, 16, 0);
        let p = pool.alloc(AllocClass::Normal).unwrap();
        assert_ne!(p, 0);
        assert_eq!(pool.stats().refills, 1);
        // 15 more come from the shard without touching the bitmap
        for _ in 0..15 {
            pool.alloc(AllocClass::Normal).unwrap();
        }
        assert_eq!(pool.stats().refills, 1);
        pool.alloc(AllocClass::Normal).unwrap();
        assert_eq!(pool.stats().refills, 2);
    }

    #[test]
    fn free_then_alloc_reuses() {
        let pool = PagePool::new(8, 4, 0);
        let p = pool.alloc(AllocClass::Normal).unwrap();
        pool.free(p);
        let all: HashSet<u32> = (0..7).map(|_| pool.alloc(AllocClass::Normal).unwrap()).collect();
        assert!(all.contains(&p));
        assert_eq!(all.len(), 7);
        assert!(!all.contains(&0));
    }

    #[test]
    fn full_pool_errors() {
        let pool = PagePool::new(4, 16, 0);
        for _ in 0..3 {
            pool.alloc(AllocClass::Normal).unwrap();
        }
        assert_eq!(pool.alloc(AllocClass::Normal), Err(NvmFull));
        assert_eq!(pool.free_pages(), 0);
        assert_eq!(pool.stats().full_events, 1);
    }

    #[test]
    fn reserve_only_for_records() {
        let pool = PagePool::new(5, 16, 2);
        assert_eq!(pool.normal_free_pages(), 2);
        pool.alloc(AllocClass::Normal).unwrap();
        pool.alloc(AllocClass::Normal).unwrap();
        assert_eq!(pool.alloc(AllocClass::Normal), Err(NvmFull));
        let r = pool.alloc(AllocClass::Record).unwrap();
        pool.free(r);
        assert_eq!(pool.alloc(AllocClass::Normal), Err(NvmFull));
    }

    #[test]
    fn alloc_many_is_all_or_nothing() {
        let pool = PagePool::new(6, 2, 0);
        assert_eq!(pool.alloc_many(6, AllocClass::Normal), Err(NvmFull));
        assert_eq!(pool.free_pages(), 5);
        assert_eq!(pool.alloc_many(5, AllocClass::Normal).unwrap().len(), 5);
    }

    #[test]
    fn steals_from_other_shards() {
        let pool = std::sync::Arc::new(PagePool::new(20, 16, 0));
        let p2 = pool.clone();
        let got = std::thread::spawn(move || p2.alloc(AllocClass::Normal).unwrap()).join().unwrap();
        // the other thread's shard now holds the rest of the batch
        let mine: Vec<u32> = (0..18).map(|_| pool.alloc(AllocClass::Normal).unwrap()).collect();
        assert!(!mine.contains(&got));
        assert!(pool.stats().steals > 0);
    }

    #[test]
    #[should_panic(expected = "double free")]
    fn double_free_panics() {
        let pool = PagePool::new(8, 4, 0);
        let p = pool.alloc(AllocClass::Normal).unwrap();
        pool.free(p);
        pool.free(p);
    }

    #[test]
    fn from_live_respects_bitmap() {
        let pool = PagePool::from_live(10, 4, 0, |p| p % 2 == 1);
        assert_eq!(pool.free_pages(), 4);
        let got: HashSet<u32> = (0..4).map(|_| pool.alloc(AllocClass::Normal).unwrap()).collect();
        assert_eq!(got, HashSet::from([2, 4, 6, 8]));
    }
}
