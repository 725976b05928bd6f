//! On-media layout of log pages and log entries.
//!
//! All integers are little-endian. See `docs/format.md` for the byte map.

use crate::pmem::PmemAddr;
use crate::{LINE_SIZE, PAGE_SIZE};

pub const SLOT_SIZE: usize = LINE_SIZE;
pub const SLOTS_PER_PAGE: u16 = (PAGE_SIZE / SLOT_SIZE) as u16;
/// Entry slots after the header slot.
pub const ENTRY_SLOTS: u16 = SLOTS_PER_PAGE - 1;
pub const INLINE_BYTES: usize = 32;
/// Largest IP payload: the inline zone plus 62 continuation slots.
pub const MAX_IP_PAYLOAD: usize = INLINE_BYTES + (ENTRY_SLOTS as usize - 1) * SLOT_SIZE;

pub const SUPER_MAGIC: u64 = u64::from_le_bytes(*b"NVLOGSB1");
pub const PAGE_MAGIC: u64 = u64::from_le_bytes(*b"NVLOGPG1");

pub const FLAG_VALID: u16 = 0x8000;
/// Set by GC on an OOP entry whose data page has been freed.
pub const FLAG_RECLAIMED: u16 = 0x4000;
const KIND_MASK: u16 = 0x00ff;

/// Offset of the 8-byte link word inside a page header.
pub const LINK_WORD_OFFSET: u16 = 0;
/// Offset of the capacity field in the page-0 header.
pub const CAPACITY_OFFSET: u16 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PageKind {
    SuperLog = 1,
    InodeLog = 2,
}

impl PageKind {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(Self::SuperLog),
            2 => Some(Self::InodeLog),
            _ => None,
        }
    }
}

/// The atomically updated first word of every log page header:
/// `next_page | slot_count << 32 | kind << 48`.
///
/// `slot_count` is zero while the page is the open tail of its chain and is
/// filled in when the page is sealed by linking a successor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkWord {
    pub next_page: u32,
    pub slot_count: u16,
    pub kind: PageKind,
}

impl LinkWord {
    pub fn encode(self) -> u64 {
        self.next_page as u64 | (self.slot_count as u64) << 32 | (self.kind as u64) << 48
    }

    pub fn decode(raw: u64) -> Option<Self> {
        let kind = PageKind::from_u8((raw >> 48) as u8)?;
        Some(LinkWord { next_page: raw as u32, slot_count: (raw >> 32) as u16, kind })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogPageHeader {
    pub link: LinkWord,
    pub owner_ino: u64,
    pub owner_dev: u64,
}

impl LogPageHeader {
    pub fn new(kind: PageKind, owner_dev: u64, owner_ino: u64) -> Self {
        LogPageHeader { link: LinkWord { next_page: 0, slot_count: 0, kind }, owner_ino, owner_dev }
    }

    pub fn encode(&self) -> [u8; SLOT_SIZE] {
        let mut b = [0u8; SLOT_SIZE];
        b[0..8].copy_from_slice(&self.link.encode().to_le_bytes());
        b[8..16].copy_from_slice(&self.owner_ino.to_le_bytes());
        b[16..24].copy_from_slice(&self.owner_dev.to_le_bytes());
        let magic = if self.link.kind == PageKind::SuperLog { SUPER_MAGIC } else { PAGE_MAGIC };
        b[24..32].copy_from_slice(&magic.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8; SLOT_SIZE]) -> Option<Self> {
        let link = LinkWord::decode(u64_at(b, 0))?;
        let magic = u64_at(b, 24);
        if magic != SUPER_MAGIC && magic != PAGE_MAGIC {
            return None;
        }
        Some(LogPageHeader { link, owner_ino: u64_at(b, 8), owner_dev: u64_at(b, 16) })
    }
}

fn u64_at(b: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(b[off..off + 8].try_into().unwrap())
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn u16_at(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes(b[off..off + 2].try_into().unwrap())
}

/// Address of slot `slot` in page `page`.
pub fn slot_addr(page: u32, slot: u16) -> PmemAddr {
    PmemAddr::new(page, slot * SLOT_SIZE as u16)
}

pub fn slot_of(addr: PmemAddr) -> u16 {
    addr.offset_in_page() / SLOT_SIZE as u16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuperLogEntry {
    pub s_dev: u64,
    pub i_ino: u64,
    pub head_log_page: u32,
    pub flag: u16,
    pub committed_log_tail: PmemAddr,
}

impl SuperLogEntry {
    /// Offset of the word holding `head_log_page` and `flag`.
    pub const HEAD_WORD_OFFSET: u16 = 16;
    pub const TAIL_OFFSET: u16 = 24;

    pub fn new(s_dev: u64, i_ino: u64, head_log_page: u32) -> Self {
        SuperLogEntry { s_dev, i_ino, head_log_page, flag: FLAG_VALID, committed_log_tail: PmemAddr::NULL }
    }

    pub fn is_valid(&self) -> bool {
        self.flag & FLAG_VALID != 0
    }

    pub fn head_word(head_log_page: u32, flag: u16) -> u64 {
        head_log_page as u64 | (flag as u64) << 32
    }

    pub fn encode(&self) -> [u8; SLOT_SIZE] {
        let mut b = [0u8; SLOT_SIZE];
        b[0..8].copy_from_slice(&self.s_dev.to_le_bytes());
        b[8..16].copy_from_slice(&self.i_ino.to_le_bytes());
        b[16..24].copy_from_slice(&Self::head_word(self.head_log_page, self.flag).to_le_bytes());
        b[24..32].copy_from_slice(&self.committed_log_tail.raw().to_le_bytes());
        b
    }

    pub fn decode(b: &[u8; SLOT_SIZE]) -> Self {
        SuperLogEntry {
            s_dev: u64_at(b, 0),
            i_ino: u64_at(b, 8),
            head_log_page: u32_at(b, 16),
            flag: u16_at(b, 20),
            committed_log_tail: PmemAddr::from_raw(u64_at(b, 24)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntryKind {
    Write = 1,
    Metadata = 2,
    WritebackRecord = 3,
}

impl EntryKind {
    pub fn from_flag(flag: u16) -> Option<Self> {
        match flag & KIND_MASK {
            1 => Some(Self::Write),
            2 => Some(Self::Metadata),
            3 => Some(Self::WritebackRecord),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InodeLogEntry {
    pub flag: u16,
    pub data_len: u16,
    pub page_index: u32,
    pub file_offset: u64,
    pub last_write: PmemAddr,
    pub tid: u64,
    pub inline: [u8; INLINE_BYTES],
}

impl InodeLogEntry {
    pub const FLAG_OFFSET: u16 = 0;
    pub const LAST_WRITE_OFFSET: u16 = 16;

    pub fn new(kind: EntryKind, tid: u64) -> Self {
        InodeLogEntry {
            flag: kind as u16 | FLAG_VALID,
            data_len: 0,
            page_index: 0,
            file_offset: 0,
            last_write: PmemAddr::NULL,
            tid,
            inline: [0; INLINE_BYTES],
        }
    }

    pub fn ip(tid: u64, file_offset: u64, data: &[u8]) -> Self {
        assert!(!data.is_empty() && data.len() <= MAX_IP_PAYLOAD);
        let mut e = Self::new(EntryKind::Write, tid);
        e.data_len = data.len() as u16;
        e.file_offset = file_offset;
        let n = data.len().min(INLINE_BYTES);
        e.inline[..n].copy_from_slice(&data[..n]);
        e
    }

    pub fn oop(tid: u64, file_offset: u64, data_page: u32) -> Self {
        assert!(data_page != 0 && file_offset % PAGE_SIZE as u64 == 0);
        let mut e = Self::new(EntryKind::Write, tid);
        e.data_len = PAGE_SIZE as u16;
        e.page_index = data_page;
        e.file_offset = file_offset;
        e
    }

    pub fn metadata(tid: u64, meta: MetadataPayload) -> Self {
        let mut e = Self::new(EntryKind::Metadata, tid);
        e.data_len = MetadataPayload::LEN as u16;
        e.inline[..MetadataPayload::LEN].copy_from_slice(&meta.encode());
        e
    }

    /// `floor` is the highest tid the disk checkpoint is known to contain.
    pub fn writeback_record(floor: u64, file_page_offset: u64) -> Self {
        let mut e = Self::new(EntryKind::WritebackRecord, floor);
        e.data_len = PAGE_SIZE as u16;
        e.file_offset = file_page_offset;
        e
    }

    pub fn kind(&self) -> Option<EntryKind> {
        EntryKind::from_flag(self.flag)
    }

    pub fn is_valid(&self) -> bool {
        self.flag & FLAG_VALID != 0
    }

    pub fn is_reclaimed(&self) -> bool {
        self.flag & FLAG_RECLAIMED != 0
    }

    pub fn is_ip(&self) -> bool {
        self.kind() == Some(EntryKind::Write) && self.page_index == 0
    }

    pub fn is_oop(&self) -> bool {
        self.kind() == Some(EntryKind::Write) && self.page_index != 0
    }

    pub fn file_page(&self) -> u64 {
        self.file_offset / PAGE_SIZE as u64
    }

    /// Slots occupied including continuation slots.
    pub fn slots(&self) -> u16 {
        if self.is_ip() {
            ip_slots(self.data_len as usize)
        } else {
            1
        }
    }

    pub fn metadata_payload(&self) -> MetadataPayload {
        MetadataPayload::decode(&self.inline)
    }

    pub fn encode(&self) -> [u8; SLOT_SIZE] {
        let mut b = [0u8; SLOT_SIZE];
        b[0..2].copy_from_slice(&self.flag.to_le_bytes());
        b[2..4].copy_from_slice(&self.data_len.to_le_bytes());
        b[4..8].copy_from_slice(&self.page_index.to_le_bytes());
        b[8..16].copy_from_slice(&self.file_offset.to_le_bytes());
        b[16..24].copy_from_slice(&self.last_write.raw().to_le_bytes());
        b[24..32].copy_from_slice(&self.tid.to_le_bytes());
        b[32..64].copy_from_slice(&self.inline);
        b
    }

    pub fn decode(b: &[u8; SLOT_SIZE]) -> Self {
        InodeLogEntry {
            flag: u16_at(b, 0),
            data_len: u16_at(b, 2),
            page_index: u32_at(b, 4),
            file_offset: u64_at(b, 8),
            last_write: PmemAddr::from_raw(u64_at(b, 16)),
            tid: u64_at(b, 24),
            inline: b[32..64].try_into().unwrap(),
        }
    }

    /// Structural checks a committed entry must pass.
    pub fn check(&self) -> Result<(), &'static str> {
        if !self.is_valid() {
            return Err("valid bit clear");
        }
        match self.kind() {
            None => Err("unknown entry kind"),
            Some(EntryKind::Write) => {
                let len = self.data_len as usize;
                if self.page_index == 0 {
                    if len == 0 || len > MAX_IP_PAYLOAD {
                        return Err("IP entry length out of range");
                    }
                    let end_in_page = self.file_offset % PAGE_SIZE as u64 + len as u64;
                    if end_in_page > PAGE_SIZE as u64 {
                        return Err("IP entry crosses a file page boundary");
                    }
                    Ok(())
                } else if len != PAGE_SIZE || self.file_offset % PAGE_SIZE as u64 != 0 {
                    Err("OOP entry not a full aligned page")
                } else {
                    Ok(())
                }
            }
            Some(EntryKind::Metadata) => {
                if self.data_len as usize != MetadataPayload::LEN {
                    Err("metadata entry length")
                } else {
                    Ok(())
                }
            }
            Some(EntryKind::WritebackRecord) => {
                if self.file_offset % PAGE_SIZE as u64 != 0 {
                    Err("write-back record not page aligned")
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Slots needed by an IP entry carrying `len` payload bytes.
pub fn ip_slots(len: usize) -> u16 {
    1 + len.saturating_sub(INLINE_BYTES).div_ceil(SLOT_SIZE) as u16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MetadataPayload {
    pub new_size: u64,
    pub mtime_ns: u64,
    pub ctime_ns: u64,
}

impl MetadataPayload {
    pub const LEN: usize = 24;

    pub fn encode(&self) -> [u8; Self::LEN] {
        let mut b = [0u8; Self::LEN];
        b[0..8].copy_from_slice(&self.new_size.to_le_bytes());
        b[8..16].copy_from_slice(&self.mtime_ns.to_le_bytes());
        b[16..24].copy_from_slice(&self.ctime_ns.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Self {
        MetadataPayload { new_size: u64_at(b, 0), mtime_ns: u64_at(b, 8), ctime_ns: u64_at(b, 16) }
    }
}
