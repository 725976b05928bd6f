//! Garbage collection of obsolete log entries, OOP data pages and log pages.
//!
//! The collector takes no file or append lock. It reads each log up to its
//! published tail and computes, per file page, the same walk recovery would
//! perform. Entries outside every walk are obsolete. OOP data pages of
//! obsolete entries are freed after their entry is flagged reclaimed; log
//! pages holding nothing live are unlinked oldest first, one fenced link
//! update per run of pages, so every intermediate chain recovers the same.

use std::collections::{BTreeSet, HashMap};

use serde::Serialize;

use crate::error::Result;
use crate::layout::*;
use crate::log::{walk_inode_log, EntryRef, InodeLog, LogStore};
use crate::pmem::PmemRead;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GcStats {
    pub logs_scanned: u64,
    pub entries_scanned: u64,
    pub obsolete_entries: u64,
    pub oop_pages_freed: u64,
    pub log_pages_freed: u64,
    pub records_kept: u64,
}

impl GcStats {
    pub fn pages_freed(&self) -> u64 {
        self.oop_pages_freed + self.log_pages_freed
    }

    pub fn add(&mut self, o: &GcStats) {
        self.logs_scanned += o.logs_scanned;
        self.entries_scanned += o.entries_scanned;
        self.obsolete_entries += o.obsolete_entries;
        self.oop_pages_freed += o.oop_pages_freed;
        self.log_pages_freed += o.log_pages_freed;
        self.records_kept += o.records_kept;
    }
}

/// What survives in one log, as recovery would see it.
#[derive(Debug, Default)]
pub struct Liveness {
    /// Indices into the walked entry list.
    pub live: BTreeSet<usize>,
    pub surviving_pages: BTreeSet<u32>,
}

/// Computes live entries and surviving pages of a walked log. `entries`
/// pairs each entry with its log page, in log order.
pub fn liveness(entries: &[(u32, EntryRef)], latest_page: u32) -> Liveness {
    let mut by_key: HashMap<u64, Vec<usize>> = HashMap::new();
    let mut last_meta = None;
    for (i, (_, e)) in entries.iter().enumerate() {
        match e.entry.kind() {
            Some(EntryKind::Metadata) => last_meta = Some(i),
            Some(_) => by_key.entry(e.entry.file_page()).or_default().push(i),
            None => {}
        }
    }
    let mut live: BTreeSet<usize> = last_meta.into_iter().collect();
    // records the walk passes, per key
    let mut reached: Vec<(u64, usize)> = Vec::new();
    for (&key, idx) in &by_key {
        let mut floor = 0;
        for &i in idx.iter().rev() {
            let e = &entries[i].1.entry;
            if e.kind() == Some(EntryKind::WritebackRecord) {
                floor = floor.max(e.tid);
                reached.push((key, i));
                continue;
            }
            if e.tid <= floor {
                break;
            }
            live.insert(i);
            if e.is_oop() {
                break;
            }
        }
    }
    let base: BTreeSet<u32> = live.iter().map(|&i| entries[i].0).chain([latest_page]).collect();
    let mut needed: BTreeSet<usize> = BTreeSet::new();
    loop {
        let surviving: BTreeSet<u32> = base.iter().copied().chain(needed.iter().map(|&i| entries[i].0)).collect();
        // oldest write per key that still sits in a surviving page
        let mut oldest: HashMap<u64, usize> = HashMap::new();
        for (&key, idx) in &by_key {
            if let Some(&i) = idx
                .iter()
                .find(|&&i| entries[i].1.entry.kind() == Some(EntryKind::Write) && surviving.contains(&entries[i].0))
            {
                oldest.insert(key, i);
            }
        }
        let next: BTreeSet<usize> =
            reached.iter().filter(|(k, r)| oldest.get(k).is_some_and(|&w| w < *r)).map(|&(_, r)| r).collect();
        if next == needed {
            live.extend(needed);
            return Liveness { live, surviving_pages: surviving };
        }
        needed = next;
    }
}

/// One collection pass over one inode log.
pub fn collect_log(store: &LogStore, log: &InodeLog, stats: &mut GcStats) -> Result<()> {
    let tail = log.committed_tail();
    if tail.is_null() {
        return Ok(());
    }
    let dev = store.device();
    let head = log.head();
    let mut entries: Vec<(u32, EntryRef)> = Vec::new();
    let pages = walk_inode_log(&**dev, log.ino, head, tail, |p, e| {
        entries.push((p, e));
        Ok(())
    })?;
    stats.logs_scanned += 1;
    stats.entries_scanned += entries.len() as u64;
    let lv = liveness(&entries, tail.page_index());
    stats.obsolete_entries += (entries.len() - lv.live.len()) as u64;
    stats.records_kept += lv
        .live
        .iter()
        .filter(|&&i| entries[i].1.entry.kind() == Some(EntryKind::WritebackRecord))
        .count() as u64;

    let doomed: Vec<(EntryRef, u32)> = entries
        .iter()
        .enumerate()
        .filter(|(i, (_, e))| !lv.live.contains(i) && e.entry.is_oop() && !e.entry.is_reclaimed())
        .map(|(_, (_, e))| (*e, e.entry.page_index))
        .collect();
    if !doomed.is_empty() {
        for (e, _) in &doomed {
            store.mark_reclaimed(e.addr, e.entry.flag)?;
        }
        // the flag must be durable before the page can be reused
        dev.sfence();
        for (_, page) in &doomed {
            store.pool().free(*page);
        }
        stats.oop_pages_freed += doomed.len() as u64;
    }

    let mut pred: Option<u32> = None;
    let mut run: Vec<u32> = Vec::new();
    for &p in &pages {
        if !lv.surviving_pages.contains(&p) {
            run.push(p);
            continue;
        }
        if !run.is_empty() {
            match pred {
                None => store.set_head(log, p)?,
                Some(q) => {
                    let hdr = LogPageHeader::decode(&dev.read_slot(slot_addr(q, 0).raw())?).expect("walked page header");
                    store.relink(q, LinkWord { next_page: p, ..hdr.link })?;
                }
            }
            dev.sfence();
            for &r in &run {
                store.pool().free(r);
            }
            stats.log_pages_freed += run.len() as u64;
            run.clear();
        }
        pred = Some(p);
    }
    debug_assert!(run.is_empty(), "the latest page always survives");
    Ok(())
}
