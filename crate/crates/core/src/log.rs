//! The on-NVM log: the super log rooted at page 0, per-inode log chains,
//! transactional appends and the two-fence commit.

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::layout::*;
use crate::pmem::{PmemAddr, PmemDevice, PmemRead};
use crate::pool::{AllocClass, PagePool};
use crate::PAGE_SIZE;

/// Volatile handle on one inode log.
///
/// The `writer` mutex is the per-inode append lock. `head` and `tail` are
/// DRAM copies published for lock-free readers (the garbage collector).
#[derive(Debug)]
pub struct InodeLog {
    pub ino: u64,
    pub super_slot: PmemAddr,
    head: AtomicU32,
    tail: AtomicU64,
    writer: Mutex<Cursor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cursor {
    pub page: u32,
    /// Next free slot; 64 means the page is full.
    pub next_slot: u16,
}

impl InodeLog {
    pub fn head(&self) -> u32 {
        self.head.load(Ordering::Acquire)
    }

    /// Last committed entry, or null.
    pub fn committed_tail(&self) -> PmemAddr {
        PmemAddr::from_raw(self.tail.load(Ordering::Acquire))
    }

    pub fn cursor(&self) -> Cursor {
        *self.writer.lock()
    }

    /// Holds the append lock until the guard drops.
    #[doc(hidden)]
    pub fn lock_append(&self) -> parking_lot::MutexGuard<'_, Cursor> {
        self.writer.lock()
    }
}

/// One element of a transaction.
#[derive(Debug, Clone, Copy)]
pub enum TxnItem<'a> {
    Ip { file_offset: u64, data: &'a [u8] },
    Oop { file_offset: u64, page: &'a [u8] },
    Meta(MetadataPayload),
    Record { file_offset: u64, floor: u64 },
}

impl TxnItem<'_> {
    fn slots(&self) -> u16 {
        match self {
            TxnItem::Ip { data, .. } => ip_slots(data.len()),
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommitInfo {
    pub tail: PmemAddr,
    pub ip_payload_bytes: u64,
    pub oop_pages: u64,
    pub slots: u64,
    pub new_log_pages: u64,
}

/// A committed entry as seen by a reader.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntryRef {
    pub addr: PmemAddr,
    pub entry: InodeLogEntry,
}

struct SuperState {
    cursor: Cursor,
    inodes: HashSet<u64>,
}

pub struct LogStore {
    dev: Arc<PmemDevice>,
    pool: Arc<PagePool>,
    s_dev: u64,
    sup: Mutex<SuperState>,
    drop_commit_fence: AtomicBool,
}

/// Result of scanning the super log.
#[derive(Debug, Clone, Default)]
pub struct SuperScan {
    pub entries: Vec<(PmemAddr, SuperLogEntry)>,
    pub pages: Vec<u32>,
    pub cursor: Option<(u32, u16)>,
}

pub fn read_capacity<R: PmemRead>(r: &R) -> Result<u32> {
    let hdr = r.read_slot(0)?;
    match LogPageHeader::decode(&hdr) {
        Some(h) if h.link.kind == PageKind::SuperLog && u64::from_le_bytes(hdr[24..32].try_into().unwrap()) == SUPER_MAGIC => {
            Ok(u64::from_le_bytes(hdr[32..40].try_into().unwrap()) as u32)
        }
        _ => Err(Error::NotFormatted),
    }
}

/// Walks the super log chain. Stops at the first invalid slot.
pub fn scan_super<R: PmemRead>(r: &R) -> Result<SuperScan> {
    let capacity = read_capacity(r)?;
    let mut scan = SuperScan::default();
    let mut page = 0u32;
    let mut seen = HashSet::new();
    loop {
        if page >= capacity || !seen.insert(page) {
            return Err(Error::corrupt(None, page, "super log chain leaves device or loops"));
        }
        let hdr = LogPageHeader::decode(&r.read_slot(slot_addr(page, 0).raw())?)
            .filter(|h| h.link.kind == PageKind::SuperLog)
            .ok_or_else(|| Error::corrupt(None, page, "bad super log page header"))?;
        scan.pages.push(page);
        for slot in 1..SLOTS_PER_PAGE {
            let addr = slot_addr(page, slot);
            let e = SuperLogEntry::decode(&r.read_slot(addr.raw())?);
            if !e.is_valid() {
                scan.cursor = Some((page, slot));
                return Ok(scan);
            }
            scan.entries.push((addr, e));
        }
        if hdr.link.next_page == 0 {
            scan.cursor = Some((page, SLOTS_PER_PAGE));
            return Ok(scan);
        }
        page = hdr.link.next_page;
    }
}

/// Reads the full payload of an IP entry.
pub fn read_ip_payload<R: PmemRead>(r: &R, at: &EntryRef) -> Result<Vec<u8>> {
    let len = at.entry.data_len as usize;
    let mut out = vec![0u8; len];
    let n = len.min(INLINE_BYTES);
    out[..n].copy_from_slice(&at.entry.inline[..n]);
    if len > INLINE_BYTES {
        r.read_into(at.addr.raw() + SLOT_SIZE as u64, &mut out[INLINE_BYTES..])?;
    }
    Ok(out)
}

pub fn read_page<R: PmemRead>(r: &R, page: u32) -> Result<Vec<u8>> {
    let mut out = vec![0u8; PAGE_SIZE];
    r.read_into(page as u64 * PAGE_SIZE as u64, &mut out)?;
    Ok(out)
}

/// Visits every committed entry of an inode log in log order, returning the
/// chain's pages. Entries after `tail` are never decoded.
pub fn walk_inode_log<R: PmemRead>(
    r: &R,
    ino: u64,
    head: u32,
    tail: PmemAddr,
    mut visit: impl FnMut(u32, EntryRef) -> Result<()>,
) -> Result<Vec<u32>> {
    let capacity = r.capacity_pages();
    if head == 0 || head >= capacity {
        return Err(Error::corrupt(Some(ino), head, "inode log head outside device"));
    }
    let mut pages = vec![head];
    if tail.is_null() {
        return Ok(pages);
    }
    let mut page = head;
    let mut seen = HashSet::from([head]);
    loop {
        let hdr = LogPageHeader::decode(&r.read_slot(slot_addr(page, 0).raw())?)
            .filter(|h| h.link.kind == PageKind::InodeLog)
            .ok_or_else(|| Error::corrupt(Some(ino), page, "bad inode log page header"))?;
        let in_tail_page = tail.page_index() == page;
        let last = if in_tail_page {
            slot_of(tail)
        } else {
            if hdr.link.slot_count == 0 || hdr.link.slot_count > ENTRY_SLOTS {
                return Err(Error::corrupt(Some(ino), page, "non-tail page is not sealed"));
            }
            hdr.link.slot_count
        };
        let mut slot = 1u16;
        let mut found_tail = false;
        while slot <= last {
            let addr = slot_addr(page, slot);
            let entry = InodeLogEntry::decode(&r.read_slot(addr.raw())?);
            entry.check().map_err(|why| Error::corrupt(Some(ino), page, format!("slot {slot}: {why}")))?;
            if entry.is_oop() && (entry.page_index == 0 || entry.page_index >= capacity) {
                return Err(Error::corrupt(Some(ino), page, format!("slot {slot}: data page outside device")));
            }
            let n = entry.slots();
            if slot + n > SLOTS_PER_PAGE {
                return Err(Error::corrupt(Some(ino), page, format!("slot {slot}: entry straddles page")));
            }
            found_tail |= addr == tail;
            visit(page, EntryRef { addr, entry })?;
            slot += n;
        }
        if in_tail_page {
            if !found_tail {
                return Err(Error::corrupt(Some(ino), page, "committed tail is not an entry boundary"));
            }
            return Ok(pages);
        }
        if slot != hdr.link.slot_count + 1 {
            return Err(Error::corrupt(Some(ino), page, "sealed slot count splits an entry"));
        }
        let next = hdr.link.next_page;
        if next == 0 || next >= capacity || !seen.insert(next) {
            return Err(Error::corrupt(Some(ino), page, "chain ends before the committed tail"));
        }
        pages.push(next);
        page = next;
    }
}

impl LogStore {
    /// Writes an empty super log at page 0.
    pub fn format(dev: &PmemDevice) -> Result<()> {
        let capacity = dev.capacity_pages();
        let mut slot0 = LogPageHeader::new(PageKind::SuperLog, 0, 0).encode();
        slot0[32..40].copy_from_slice(&(capacity as u64).to_le_bytes());
        let mut page = vec![0u8; PAGE_SIZE];
        page[..SLOT_SIZE].copy_from_slice(&slot0);
        dev.store(PmemAddr::NULL, &page)?;
        dev.clwb(PmemAddr::NULL, PAGE_SIZE)?;
        dev.sfence();
        Ok(())
    }

    /// Attaches to a formatted device whose allocator state is already known.
    pub fn open(dev: Arc<PmemDevice>, pool: Arc<PagePool>, s_dev: u64, scan: &SuperScan) -> Self {
        let (page, next_slot) = scan.cursor.unwrap_or((0, 1));
        let inodes = scan.entries.iter().filter(|(_, e)| e.s_dev == s_dev).map(|(_, e)| e.i_ino).collect();
        LogStore {
            dev,
            pool,
            s_dev,
            sup: Mutex::new(SuperState { cursor: Cursor { page, next_slot }, inodes }),
            drop_commit_fence: AtomicBool::new(false),
        }
    }

    pub fn device(&self) -> &Arc<PmemDevice> {
        &self.dev
    }

    pub fn pool(&self) -> &Arc<PagePool> {
        &self.pool
    }

    pub fn s_dev(&self) -> u64 {
        self.s_dev
    }

    /// Test hook: omit the fence that orders entry persistence before the
    /// tail update.
    pub fn set_drop_commit_fence(&self, on: bool) {
        self.drop_commit_fence.store(on, Ordering::Relaxed);
    }

    /// Creates and persists the super log entry and head page for `ino`.
    pub fn create_inode_log(&self, ino: u64, class: AllocClass) -> Result<Arc<InodeLog>> {
        let mut sup = self.sup.lock();
        if sup.inodes.contains(&ino) {
            return Err(Error::DuplicateInode { s_dev: self.s_dev, ino });
        }
        let need_super_page = sup.cursor.next_slot >= SLOTS_PER_PAGE;
        let pages = self.pool.alloc_many(1 + need_super_page as usize, class)?;
        let head = pages[0];
        let hdr = LogPageHeader::new(PageKind::InodeLog, self.s_dev, ino).encode();
        self.dev.store(slot_addr(head, 0), &hdr)?;
        self.dev.clwb(slot_addr(head, 0), SLOT_SIZE)?;
        if need_super_page {
            let new = pages[1];
            let mut page = vec![0u8; PAGE_SIZE];
            page[..SLOT_SIZE].copy_from_slice(&LogPageHeader::new(PageKind::SuperLog, self.s_dev, 0).encode());
            self.dev.store(slot_addr(new, 0), &page)?;
            self.dev.clwb(slot_addr(new, 0), PAGE_SIZE)?;
            // the new page must be durable and empty before it is reachable
            self.dev.sfence();
            let link = LinkWord { next_page: new, slot_count: ENTRY_SLOTS, kind: PageKind::SuperLog };
            self.dev.store_u64(slot_addr(sup.cursor.page, 0), link.encode())?;
            self.dev.clwb(slot_addr(sup.cursor.page, 0), 8)?;
            sup.cursor = Cursor { page: new, next_slot: 1 };
        }
        self.dev.sfence();
        let at = slot_addr(sup.cursor.page, sup.cursor.next_slot);
        let entry = SuperLogEntry::new(self.s_dev, ino, head);
        self.dev.store(at, &entry.encode())?;
        self.dev.clwb(at, SLOT_SIZE)?;
        self.dev.sfence();
        sup.cursor.next_slot += 1;
        sup.inodes.insert(ino);
        Ok(Arc::new(InodeLog {
            ino,
            super_slot: at,
            head: AtomicU32::new(head),
            tail: AtomicU64::new(0),
            writer: Mutex::new(Cursor { page: head, next_slot: 1 }),
        }))
    }

    /// Rebuilds the handle of an existing log after recovery.
    pub fn attach_inode_log(&self, ino: u64, super_slot: PmemAddr, head: u32, tail: PmemAddr, cursor: Cursor) -> Arc<InodeLog> {
        self.sup.lock().inodes.insert(ino);
        Arc::new(InodeLog {
            ino,
            super_slot,
            head: AtomicU32::new(head),
            tail: AtomicU64::new(tail.raw()),
            writer: Mutex::new(cursor),
        })
    }

    /// Appends `items` as one transaction and commits it.
    ///
    /// All pages the transaction needs are reserved first, so the only
    /// failure mode is [`Error::NvmFull`] with nothing written. `on_commit`
    /// runs after the tail store is issued and before the fence that makes
    /// it durable; it receives the device fence count at that moment.
    pub fn append_txn(
        &self,
        log: &InodeLog,
        tid: u64,
        items: &[TxnItem<'_>],
        class: AllocClass,
        on_commit: impl FnOnce(u64),
    ) -> Result<CommitInfo> {
        if items.is_empty() {
            return Ok(CommitInfo { tail: log.committed_tail(), ..Default::default() });
        }
        let mut cur = log.writer.lock();
        let mut need = 0usize;
        let mut probe = *cur;
        for it in items {
            if probe.next_slot + it.slots() > SLOTS_PER_PAGE {
                need += 1;
                probe.next_slot = 1;
            }
            probe.next_slot += it.slots();
            if matches!(it, TxnItem::Oop { .. }) {
                need += 1;
            }
        }
        let mut pages = self.pool.alloc_many(need, class)?.into_iter();
        let mut info = CommitInfo::default();
        let mut last = PmemAddr::NULL;
        for it in items {
            let n = it.slots();
            if cur.next_slot + n > SLOTS_PER_PAGE {
                let new = pages.next().expect("reserved log page");
                let hdr = LogPageHeader::new(PageKind::InodeLog, self.s_dev, log.ino).encode();
                self.dev.store(slot_addr(new, 0), &hdr)?;
                self.dev.clwb(slot_addr(new, 0), SLOT_SIZE)?;
                let link = LinkWord { next_page: new, slot_count: cur.next_slot - 1, kind: PageKind::InodeLog };
                self.dev.store_u64(slot_addr(cur.page, 0), link.encode())?;
                self.dev.clwb(slot_addr(cur.page, 0), 8)?;
                *cur = Cursor { page: new, next_slot: 1 };
                info.new_log_pages += 1;
            }
            let at = slot_addr(cur.page, cur.next_slot);
            match *it {
                TxnItem::Ip { file_offset, data } => {
                    let e = InodeLogEntry::ip(tid, file_offset, data);
                    self.dev.store(at, &e.encode())?;
                    if data.len() > INLINE_BYTES {
                        self.dev.store(at.add(SLOT_SIZE as u64), &data[INLINE_BYTES..])?;
                    }
                    self.dev.clwb(at, n as usize * SLOT_SIZE)?;
                    info.ip_payload_bytes += data.len() as u64;
                }
                TxnItem::Oop { file_offset, page } => {
                    assert_eq!(page.len(), PAGE_SIZE);
                    let data_page = pages.next().expect("reserved data page");
                    let base = PmemAddr::new(data_page, 0);
                    self.dev.store(base, page)?;
                    self.dev.clwb(base, PAGE_SIZE)?;
                    let e = InodeLogEntry::oop(tid, file_offset, data_page);
                    self.dev.store(at, &e.encode())?;
                    self.dev.clwb(at, SLOT_SIZE)?;
                    info.oop_pages += 1;
                }
                TxnItem::Meta(m) => {
                    self.dev.store(at, &InodeLogEntry::metadata(tid, m).encode())?;
                    self.dev.clwb(at, SLOT_SIZE)?;
                }
                TxnItem::Record { file_offset, floor } => {
                    self.dev.store(at, &InodeLogEntry::writeback_record(floor, file_offset).encode())?;
                    self.dev.clwb(at, SLOT_SIZE)?;
                }
            }
            last = at;
            cur.next_slot += n;
            info.slots += n as u64;
        }
        debug_assert!(pages.next().is_none());
        if !self.drop_commit_fence.load(Ordering::Relaxed) {
            self.dev.sfence();
        }
        let tail_at = log.super_slot.add(SuperLogEntry::TAIL_OFFSET as u64);
        self.dev.store_u64(tail_at, last.raw())?;
        self.dev.clwb(tail_at, 8)?;
        on_commit(self.dev.fence_count());
        self.dev.sfence();
        log.tail.store(last.raw(), Ordering::Release);
        info.tail = last;
        Ok(info)
    }

    /// Sets `FLAG_RECLAIMED` on a committed OOP entry. Not fenced.
    pub fn mark_reclaimed(&self, at: PmemAddr, flag: u16) -> Result<()> {
        let new = flag | FLAG_RECLAIMED;
        self.dev.store_atomic(at, &new.to_le_bytes())?;
        self.dev.clwb(at, 2)?;
        Ok(())
    }

    /// Points `page`'s successor link at `next`, keeping its sealed count.
    /// Not fenced.
    pub fn relink(&self, page: u32, link: LinkWord) -> Result<()> {
        let at = slot_addr(page, 0);
        self.dev.store_u64(at, link.encode())?;
        self.dev.clwb(at, 8)?;
        Ok(())
    }

    /// Moves the persisted head of `log`. Not fenced.
    pub fn set_head(&self, log: &InodeLog, head: u32) -> Result<()> {
        let at = log.super_slot.add(SuperLogEntry::HEAD_WORD_OFFSET as u64);
        self.dev.store_u64(at, SuperLogEntry::head_word(head, FLAG_VALID))?;
        self.dev.clwb(at, 8)?;
        log.head.store(head, Ordering::Release);
        Ok(())
    }
}

impl std::fmt::Debug for LogStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogStore").field("s_dev", &self.s_dev).finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmem::{CrashPolicy, PmemImage, PmemMode};

    fn fresh(pages: u32) -> (Arc<PmemDevice>, LogStore) {
        let dev = Arc::new(PmemDevice::new(pages, PmemMode::Adr));
        LogStore::format(&dev).unwrap();
        let scan = scan_super(&*dev).unwrap();
        let pool = Arc::new(PagePool::new(pages, 16, 0));
        let store = LogStore::open(dev.clone(), pool, 1, &scan);
        (dev, store)
    }

    fn entries<R: PmemRead>(r: &R, log: &InodeLog, tail: PmemAddr) -> Vec<EntryRef> {
        let mut out = Vec::new();
        walk_inode_log(r, log.ino, log.head(), tail, |_, e| {
            out.push(e);
            Ok(())
        })
        .unwrap();
        out
    }

    #[test]
    fn first_inode_lands_in_page0_slot1() {
        let (dev, store) = fresh(32);
        let log = store.create_inode_log(7, AllocClass::Normal).unwrap();
        assert_eq!(log.super_slot, slot_addr(0, 1));
        let scan = scan_super(&dev.durable_image()).unwrap();
        assert_eq!(scan.entries.len(), 1);
        assert_eq!(scan.entries[0].1.i_ino, 7);
        assert_eq!(scan.cursor, Some((0, 2)));
    }

    #[test]
    fn sixty_fourth_inode_chains_a_super_page() {
        let (dev, store) = fresh(256);
        for ino in 0..63 {
            store.create_inode_log(ino, AllocClass::Normal).unwrap();
        }
        assert_eq!(scan_super(&*dev).unwrap().pages, vec![0]);
        let log = store.create_inode_log(63, AllocClass::Normal).unwrap();
        assert_ne!(log.super_slot.page_index(), 0);
        assert_eq!(slot_of(log.super_slot), 1);
        let scan = scan_super(&dev.durable_image()).unwrap();
        assert_eq!(scan.entries.len(), 64);
        assert_eq!(scan.pages.len(), 2);
    }

    #[test]
    fn duplicate_inode_rejected() {
        let (_, store) = fresh(16);
        store.create_inode_log(3, AllocClass::Normal).unwrap();
        assert!(matches!(store.create_inode_log(3, AllocClass::Normal), Err(Error::DuplicateInode { .. })));
    }

    #[test]
    fn slot_consumption() {
        let (dev, store) = fresh(32);
        let log = store.create_inode_log(1, AllocClass::Normal).unwrap();
        let d20 = [1u8; 20];
        let info = store.append_txn(&log, 1, &[TxnItem::Ip { file_offset: 0, data: &d20 }], AllocClass::Normal, |_| {}).unwrap();
        assert_eq!(info.slots, 1);
        let d110 = [2u8; 110];
        let info = store.append_txn(&log, 2, &[TxnItem::Ip { file_offset: 0, data: &d110 }], AllocClass::Normal, |_| {}).unwrap();
        assert_eq!(info.slots, 3);
        assert_eq!(info.ip_payload_bytes, 110);
        let es = entries(&*dev, &log, log.committed_tail());
        assert_eq!(es.len(), 2);
        assert_eq!(read_ip_payload(&*dev, &es[1]).unwrap(), d110.to_vec());
    }

    #[test]
    fn oop_allocates_fresh_page_each_time() {
        let (dev, store) = fresh(32);
        let log = store.create_inode_log(1, AllocClass::Normal).unwrap();
        let page = [5u8; PAGE_SIZE];
        for tid in 1..=2 {
            store.append_txn(&log, tid, &[TxnItem::Oop { file_offset: 4096, page: &page }], AllocClass::Normal, |_| {}).unwrap();
        }
        let es = entries(&*dev, &log, log.committed_tail());
        assert_ne!(es[0].entry.page_index, es[1].entry.page_index);
        assert_eq!(read_page(&*dev, es[1].entry.page_index).unwrap(), page.to_vec());
    }

    #[test]
    fn uncommitted_txn_is_invisible_at_every_fence() {
        let (dev, store) = fresh(64);
        let log = store.create_inode_log(1, AllocClass::Normal).unwrap();
        store.append_txn(&log, 1, &[TxnItem::Ip { file_offset: 0, data: b"old" }], AllocClass::Normal, |_| {}).unwrap();
        let images: Arc<Mutex<Vec<PmemImage>>> = Arc::default();
        let sink = images.clone();
        dev.set_fence_hook(Some(Box::new(move |v| {
            sink.lock().extend(v.images(CrashPolicy::EnumerateSubsets { cap: 256, seed: 9 }));
        })));
        let page = [9u8; PAGE_SIZE];
        let big = [7u8; 3000];
        store
            .append_txn(
                &log,
                2,
                &[
                    TxnItem::Ip { file_offset: 100, data: &big },
                    TxnItem::Oop { file_offset: 4096, page: &page },
                    TxnItem::Ip { file_offset: 8192, data: &big },
                ],
                AllocClass::Normal,
                |_| {},
            )
            .unwrap();
        dev.set_fence_hook(None);
        let images = images.lock();
        assert!(images.len() > 4);
        for img in images.iter() {
            let scan = scan_super(img).unwrap();
            let sup = scan.entries[0].1;
            let es = entries(img, &log, sup.committed_log_tail);
            let tids: Vec<u64> = es.iter().map(|e| e.entry.tid).collect();
            assert!(tids == vec![1] || tids == vec![1, 2, 2, 2], "partial transaction visible: {tids:?}");
        }
    }

    #[test]
    fn transaction_spills_to_new_log_page() {
        let (dev, store) = fresh(64);
        let log = store.create_inode_log(1, AllocClass::Normal).unwrap();
        let d = [3u8; 4000];
        store.append_txn(&log, 1, &[TxnItem::Ip { file_offset: 0, data: &d }], AllocClass::Normal, |_| {}).unwrap();
        let info = store
            .append_txn(&log, 2, &[TxnItem::Ip { file_offset: 0, data: b"x" }], AllocClass::Normal, |_| {})
            .unwrap();
        assert_eq!(info.new_log_pages, 1);
        let img = dev.durable_image();
        let pages = walk_inode_log(&img, 1, log.head(), log.committed_tail(), |_, _| Ok(())).unwrap();
        assert_eq!(pages.len(), 2);
    }

    #[test]
    fn nvm_full_leaves_log_untouched() {
        let (dev, store) = fresh(4);
        let log = store.create_inode_log(1, AllocClass::Normal).unwrap();
        let page = [1u8; PAGE_SIZE];
        let items = [TxnItem::Oop { file_offset: 0, page: &page }; 3];
        assert!(matches!(store.append_txn(&log, 1, &items, AllocClass::Normal, |_| {}), Err(Error::NvmFull)));
        assert!(log.committed_tail().is_null());
        assert_eq!(store.pool().free_pages(), 2);
        assert_eq!(dev.pending_count(), 0);
    }

    #[test]
    fn tails_increase() {
        let (_, store) = fresh(16);
        let log = store.create_inode_log(1, AllocClass::Normal).unwrap();
        let mut prev = PmemAddr::NULL;
        for tid in 1..10 {
            let info = store.append_txn(&log, tid, &[TxnItem::Ip { file_offset: 0, data: b"ab" }], AllocClass::Normal, |_| {}).unwrap();
            assert!(info.tail > prev);
            prev = info.tail;
        }
    }

    #[test]
    fn unformatted_device_detected() {
        let img = PmemImage::zeroed(4);
        assert!(matches!(scan_super(&img), Err(Error::NotFormatted)));
    }
}
