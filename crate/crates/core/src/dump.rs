//! Human-readable listing of an NVM image's log chains.

use std::fmt::Write;

use crate::error::Result;
use crate::layout::{slot_of, EntryKind};
use crate::log::{read_capacity, scan_super, walk_inode_log, EntryRef};
use crate::pmem::PmemRead;

/// Lists the super log and every inode log. A corrupt inode log is
/// reported inline and the listing continues with the next one.
pub fn dump_log<R: PmemRead>(r: &R) -> Result<String> {
    let capacity = read_capacity(r)?;
    let scan = scan_super(r)?;
    let mut out = String::new();
    let _ = writeln!(out, "device: {capacity} pages");
    let _ = writeln!(out, "super log: pages {:?}, {} inode(s)", scan.pages, scan.entries.len());
    for (addr, e) in &scan.entries {
        let _ = writeln!(
            out,
            "inode dev {} ino {} @ {addr}: head p{} tail {} flag {:#06x}",
            e.s_dev,
            e.i_ino,
            e.head_log_page,
            if e.committed_log_tail.is_null() { "-".to_string() } else { e.committed_log_tail.to_string() },
            e.flag
        );
        let walked = walk_inode_log(r, e.i_ino, e.head_log_page, e.committed_log_tail, |page, at| {
            let _ = writeln!(out, "  p{page} slot {:>2}  {}", slot_of(at.addr), describe(&at));
            Ok(())
        });
        match walked {
            Ok(pages) => {
                let _ = writeln!(out, "  chain: {pages:?}");
            }
            Err(err) => {
                let _ = writeln!(out, "  error: {err}");
            }
        }
    }
    Ok(out)
}

fn describe(at: &EntryRef) -> String {
    let e = &at.entry;
    let mut s = match e.kind() {
        Some(EntryKind::Write) if e.is_oop() => {
            format!("tid {:<5} WRITE OOP  off {} -> data page {}", e.tid, e.file_offset, e.page_index)
        }
        Some(EntryKind::Write) => format!("tid {:<5} WRITE IP   off {} len {}", e.tid, e.file_offset, e.data_len),
        Some(EntryKind::Metadata) => {
            let m = e.metadata_payload();
            format!("tid {:<5} META       size {} mtime {} ctime {}", e.tid, m.new_size, m.mtime_ns, m.ctime_ns)
        }
        Some(EntryKind::WritebackRecord) => format!("RECORD     page {} floor {}", e.file_page(), e.tid),
        None => format!("unknown flag {:#06x}", e.flag),
    };
    if !e.last_write.is_null() {
        let _ = write!(s, " prev {}", e.last_write);
    }
    if e.is_reclaimed() {
        s.push_str(" [reclaimed]");
    }
    s
}
