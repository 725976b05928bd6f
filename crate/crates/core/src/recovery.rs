//! Crash recovery: rebuild per-page entry chains through `last_write`, walk
//! each chain back to its expiry boundary and replay forward onto disk.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Instant;

use bitvec::prelude::*;
use serde::Serialize;

use crate::disk::DiskState;
use crate::error::{Error, Result};
use crate::layout::*;
use crate::log::{read_ip_payload, read_page, scan_super, walk_inode_log, Cursor, EntryRef, SuperScan};
use crate::pmem::{PmemAddr, PmemImage, PmemRead};
use crate::PAGE_SIZE;

#[derive(Debug, Clone, Copy, Default)]
pub struct RecoverOptions {
    /// Test hook: ignore write-back records, replaying every entry back to
    /// the newest OOP.
    pub no_expiry: bool,
}

/// Where an inode log resumes after recovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RecoveredLog {
    pub ino: u64,
    #[serde(serialize_with = "ser_addr")]
    pub super_slot: PmemAddr,
    pub head: u32,
    #[serde(serialize_with = "ser_addr")]
    pub tail: PmemAddr,
    #[serde(skip)]
    pub cursor: Cursor,
    pub entries: u64,
    pub pages: u64,
}

fn ser_addr<S: serde::Serializer>(a: &PmemAddr, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_u64(a.raw())
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RecoveryReport {
    pub inodes: u64,
    pub entries_scanned: u64,
    pub replayed_pages: u64,
    pub replayed_entries: u64,
    pub replayed_bytes: u64,
    /// Valid-looking entries found past a committed tail.
    pub dropped_uncommitted: u64,
    pub sizes_updated: u64,
    pub live_pages: u64,
    pub free_pages: u64,
    pub max_tid: u64,
    pub elapsed_us: u64,
    pub logs: Vec<RecoveredLog>,
    /// Pages whose disk content was rebuilt from the log, per inode.
    pub replayed: BTreeMap<u64, Vec<u64>>,
    /// Committed data and metadata entries per tid (records excluded).
    #[serde(skip)]
    pub entries_by_tid: BTreeMap<u64, u32>,
    #[serde(skip)]
    pub live: BitVec,
    #[serde(skip)]
    pub scan: SuperScan,
}

impl RecoveryReport {
    pub fn is_live(&self, page: u32) -> bool {
        self.live.get(page as usize).is_some_and(|b| *b)
    }
}

/// Runs recovery on a durable image and the disk it was paired with.
///
/// `last_write` links are written into `image`; replayed pages and sizes go
/// to `disk`. Running it again on the result changes nothing.
pub fn recover(image: &mut PmemImage, disk: &mut DiskState, opts: RecoverOptions) -> Result<RecoveryReport> {
    let started = Instant::now();
    let scan = scan_super(image)?;
    let capacity = image.capacity_pages();
    let mut rep = RecoveryReport { live: bitvec![0; capacity as usize], ..Default::default() };
    for &p in &scan.pages {
        rep.live.set(p as usize, true);
    }

    // pass 1: walk committed entries, link same-page chains, build the index
    let mut index: HashMap<(u64, u64), PmemAddr> = HashMap::new();
    let mut links: Vec<(PmemAddr, PmemAddr)> = Vec::new();
    let mut meta_size: HashMap<u64, u64> = HashMap::new();
    let mut inos = Vec::new();
    for &(slot, sup) in &scan.entries {
        let ino = sup.i_ino;
        let mut entries = Vec::new();
        let pages = walk_inode_log(image, ino, sup.head_log_page, sup.committed_log_tail, |_, e| {
            entries.push(e);
            Ok(())
        })?;
        for &p in &pages {
            if rep.is_live(p) {
                return Err(Error::corrupt(Some(ino), p, "log page reachable twice"));
            }
            rep.live.set(p as usize, true);
        }
        for e in &entries {
            let en = e.entry;
            rep.entries_scanned += 1;
            match en.kind() {
                Some(EntryKind::Metadata) => {
                    let m = meta_size.entry(ino).or_default();
                    *m = (*m).max(en.metadata_payload().new_size);
                    *rep.entries_by_tid.entry(en.tid).or_default() += 1;
                    rep.max_tid = rep.max_tid.max(en.tid);
                }
                Some(EntryKind::Write) | Some(EntryKind::WritebackRecord) => {
                    let prev = index.insert((ino, en.file_page()), e.addr).unwrap_or(PmemAddr::NULL);
                    links.push((e.addr, prev));
                    rep.max_tid = rep.max_tid.max(en.tid);
                    if en.kind() == Some(EntryKind::Write) {
                        *rep.entries_by_tid.entry(en.tid).or_default() += 1;
                        if en.is_oop() && !en.is_reclaimed() {
                            if rep.is_live(en.page_index) {
                                return Err(Error::corrupt(Some(ino), en.page_index, "data page referenced twice"));
                            }
                            rep.live.set(en.page_index as usize, true);
                        }
                    }
                }
                None => unreachable!("walk checks entry kinds"),
            }
        }
        let tail = sup.committed_log_tail;
        let cursor = match entries.last() {
            Some(last) => Cursor { page: tail.page_index(), next_slot: slot_of(tail) + last.entry.slots() },
            None => Cursor { page: sup.head_log_page, next_slot: 1 },
        };
        rep.dropped_uncommitted += count_after(image, cursor)?;
        rep.logs.push(RecoveredLog {
            ino,
            super_slot: slot,
            head: sup.head_log_page,
            tail,
            cursor,
            entries: entries.len() as u64,
            pages: pages.len() as u64,
        });
        inos.push(ino);
    }
    rep.inodes = inos.len() as u64;
    for (at, prev) in links {
        image.write_u64(at.raw() + InodeLogEntry::LAST_WRITE_OFFSET as u64, prev.raw())?;
    }

    // pass 2: per page, walk back to the boundary and replay forward
    let keys: BTreeSet<(u64, u64)> = index.keys().copied().collect();
    for (ino, page) in keys {
        let chain = walk_back(image, ino, index[&(ino, page)], opts)?;
        if chain.is_empty() {
            continue;
        }
        let mut bytes = disk.page_bytes(ino, page);
        for e in chain.iter().rev() {
            if e.entry.is_oop() {
                bytes.copy_from_slice(&read_page(image, e.entry.page_index)?);
            } else {
                let data = read_ip_payload(image, e)?;
                let off = (e.entry.file_offset % PAGE_SIZE as u64) as usize;
                bytes[off..off + data.len()].copy_from_slice(&data);
            }
            rep.replayed_bytes += e.entry.data_len as u64;
        }
        rep.replayed_entries += chain.len() as u64;
        rep.replayed_pages += 1;
        rep.replayed.entry(ino).or_default().push(page);
        disk.put_page(ino, page, Arc::new(bytes));
    }
    for &ino in &inos {
        if let Some(&m) = meta_size.get(&ino) {
            if m > disk.size(ino) {
                disk.set_size(ino, m);
                rep.sizes_updated += 1;
            }
        }
    }
    rep.live_pages = rep.live.count_ones() as u64;
    rep.free_pages = capacity as u64 - rep.live_pages;
    rep.scan = scan;
    rep.elapsed_us = started.elapsed().as_micros() as u64;
    Ok(rep)
}

/// Entries to replay for one page, newest first.
fn walk_back(image: &PmemImage, ino: u64, latest: PmemAddr, opts: RecoverOptions) -> Result<Vec<EntryRef>> {
    let mut out = Vec::new();
    let mut floor = 0u64;
    let mut at = latest;
    while !at.is_null() {
        let entry = InodeLogEntry::decode(&image.read_slot(at.raw())?);
        match entry.kind() {
            Some(EntryKind::WritebackRecord) => {
                if !opts.no_expiry {
                    floor = floor.max(entry.tid);
                }
            }
            Some(EntryKind::Write) => {
                if entry.tid <= floor {
                    break;
                }
                if entry.is_reclaimed() {
                    return Err(Error::corrupt(Some(ino), at.page_index(), "walk reached a reclaimed data page"));
                }
                out.push(EntryRef { addr: at, entry });
                if entry.is_oop() {
                    break;
                }
            }
            _ => return Err(Error::corrupt(Some(ino), at.page_index(), "last_write points at a non-page entry")),
        }
        at = entry.last_write;
    }
    Ok(out)
}

/// Counts valid entries in the slots following the committed tail.
fn count_after(image: &PmemImage, cursor: Cursor) -> Result<u64> {
    let mut n = 0;
    let mut slot = cursor.next_slot;
    while slot < SLOTS_PER_PAGE {
        let e = InodeLogEntry::decode(&image.read_slot(slot_addr(cursor.page, slot).raw())?);
        if e.check().is_err() {
            break;
        }
        n += 1;
        slot += e.slots().max(1);
    }
    Ok(n)
}
