//! Latency-simulated disk: per-inode page files plus a size sidecar.
//!
//! A page write is atomic and durable once it returns. The in-memory state
//! is the source of truth; when a directory is attached every write is also
//! written through to `ino-<n>.pages` / `ino-<n>.meta`.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::pmem::Page;
use crate::simclock::{self, LatencyMode};
use crate::PAGE_SIZE;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DiskFile {
    pub pages: BTreeMap<u64, Arc<Page>>,
    pub size: u64,
}

/// A cloneable snapshot of everything on disk.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DiskState {
    pub files: BTreeMap<u64, DiskFile>,
}

impl DiskState {
    pub fn page(&self, ino: u64, page_no: u64) -> Option<&Arc<Page>> {
        self.files.get(&ino)?.pages.get(&page_no)
    }

    /// Page content, zero-filled when never written.
    pub fn page_bytes(&self, ino: u64, page_no: u64) -> Page {
        self.page(ino, page_no).map(|p| **p).unwrap_or([0u8; PAGE_SIZE])
    }

    pub fn size(&self, ino: u64) -> u64 {
        self.files.get(&ino).map_or(0, |f| f.size)
    }

    pub fn put_page(&mut self, ino: u64, page_no: u64, bytes: Arc<Page>) {
        self.files.entry(ino).or_default().pages.insert(page_no, bytes);
    }

    pub fn set_size(&mut self, ino: u64, size: u64) {
        self.files.entry(ino).or_default().size = size;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DiskStats {
    pub page_writes: u64,
    pub sync_page_writes: u64,
    pub meta_writes: u64,
    pub page_reads: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct DiskLatency {
    pub write_us: u64,
    pub sync_write_us: u64,
    pub mode: LatencyMode,
}

impl Default for DiskLatency {
    fn default() -> Self {
        DiskLatency { write_us: 80, sync_write_us: 80, mode: LatencyMode::Off }
    }
}

pub struct Disk {
    state: Mutex<DiskState>,
    dir: Option<PathBuf>,
    latency: DiskLatency,
    fail_writes: AtomicU32,
    page_writes: AtomicU64,
    sync_page_writes: AtomicU64,
    meta_writes: AtomicU64,
    page_reads: AtomicU64,
}

fn pages_path(dir: &Path, ino: u64) -> PathBuf {
    dir.join(format!("ino-{ino}.pages"))
}

fn meta_path(dir: &Path, ino: u64) -> PathBuf {
    dir.join(format!("ino-{ino}.meta"))
}

impl Disk {
    pub fn in_memory(latency: DiskLatency) -> Self {
        Self::from_state(DiskState::default(), latency)
    }

    pub fn from_state(state: DiskState, latency: DiskLatency) -> Self {
        Disk {
            state: Mutex::new(state),
            dir: None,
            latency,
            fail_writes: AtomicU32::new(0),
            page_writes: AtomicU64::new(0),
            sync_page_writes: AtomicU64::new(0),
            meta_writes: AtomicU64::new(0),
            page_reads: AtomicU64::new(0),
        }
    }

    /// Opens (creating if needed) a disk directory and loads its content.
    pub fn open_dir(dir: &Path, latency: DiskLatency) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let mut state = DiskState::default();
        for ent in fs::read_dir(dir)? {
            let ent = ent?;
            let name = ent.file_name().to_string_lossy().into_owned();
            let Some(rest) = name.strip_prefix("ino-") else { continue };
            if let Some(ino) = rest.strip_suffix(".pages").and_then(|s| s.parse::<u64>().ok()) {
                let mut bytes = Vec::new();
                File::open(ent.path())?.read_to_end(&mut bytes)?;
                let file = state.files.entry(ino).or_default();
                for (i, chunk) in bytes.chunks(PAGE_SIZE).enumerate() {
                    if chunk.iter().any(|&b| b != 0) {
                        let mut p = [0u8; PAGE_SIZE];
                        p[..chunk.len()].copy_from_slice(chunk);
                        file.pages.insert(i as u64, Arc::new(p));
                    }
                }
            } else if let Some(ino) = rest.strip_suffix(".meta").and_then(|s| s.parse::<u64>().ok()) {
                let mut b = [0u8; 8];
                File::open(ent.path())?.read_exact(&mut b)?;
                state.files.entry(ino).or_default().size = u64::from_le_bytes(b);
            }
        }
        let mut disk = Self::from_state(state, latency);
        disk.dir = Some(dir.to_path_buf());
        Ok(disk)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Makes the next `n` page writes fail.
    pub fn inject_write_failures(&self, n: u32) {
        self.fail_writes.store(n, Ordering::Relaxed);
    }

    pub fn read_page(&self, ino: u64, page_no: u64) -> Option<Arc<Page>> {
        self.page_reads.fetch_add(1, Ordering::Relaxed);
        self.state.lock().page(ino, page_no).cloned()
    }

    pub fn size(&self, ino: u64) -> u64 {
        self.state.lock().size(ino)
    }

    /// Atomically and durably writes one page. `sync` selects the foreground
    /// (synchronous) latency.
    pub fn write_page(&self, ino: u64, page_no: u64, bytes: &Page, sync: bool) -> std::io::Result<()> {
        let latency = if sync { self.latency.sync_write_us } else { self.latency.write_us };
        simclock::charge(self.latency.mode, latency * 1000);
        if self
            .fail_writes
            .fetch_update(Ordering::Relaxed, Ordering::Relaxed, |n| n.checked_sub(1))
            .is_ok()
        {
            return Err(std::io::Error::other("injected disk write failure"));
        }
        if let Some(dir) = &self.dir {
            let mut f = OpenOptions::new().write(true).create(true).truncate(false).open(pages_path(dir, ino))?;
            f.seek(SeekFrom::Start(page_no * PAGE_SIZE as u64))?;
            f.write_all(bytes)?;
            f.sync_data()?;
        }
        self.state.lock().put_page(ino, page_no, Arc::new(*bytes));
        self.page_writes.fetch_add(1, Ordering::Relaxed);
        if sync {
            self.sync_page_writes.fetch_add(1, Ordering::Relaxed);
        }
        Ok(())
    }

    /// Writes the size sidecar.
    pub fn write_size(&self, ino: u64, size: u64, sync: bool) -> std::io::Result<()> {
        let latency = if sync { self.latency.sync_write_us } else { self.latency.write_us };
        simclock::charge(self.latency.mode, latency * 1000);
        if let Some(dir) = &self.dir {
            let mut f = File::create(meta_path(dir, ino))?;
            f.write_all(&size.to_le_bytes())?;
            f.sync_data()?;
        }
        self.state.lock().set_size(ino, size);
        self.meta_writes.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn snapshot(&self) -> DiskState {
        self.state.lock().clone()
    }

    /// Replaces disk content wholesale (used after recovery on a copy).
    pub fn restore(&self, state: DiskState) -> std::io::Result<()> {
        if let Some(dir) = &self.dir {
            for (ino, f) in &state.files {
                let mut out = OpenOptions::new().write(true).create(true).truncate(false).open(pages_path(dir, *ino))?;
                for (no, p) in &f.pages {
                    out.seek(SeekFrom::Start(no * PAGE_SIZE as u64))?;
                    out.write_all(&p[..])?;
                }
                out.sync_data()?;
                File::create(meta_path(dir, *ino))?.write_all(&f.size.to_le_bytes())?;
            }
        }
        *self.state.lock() = state;
        Ok(())
    }

    pub fn stats(&self) -> DiskStats {
        DiskStats {
            page_writes: self.page_writes.load(Ordering::Relaxed),
            sync_page_writes: self.sync_page_writes.load(Ordering::Relaxed),
            meta_writes: self.meta_writes.load(Ordering::Relaxed),
            page_reads: self.page_reads.load(Ordering::Relaxed),
        }
    }
}

impl std::fmt::Debug for Disk {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Disk").field("dir", &self.dir).finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_roundtrip_in_memory() {
        let d = Disk::in_memory(DiskLatency::default());
        assert!(d.read_page(1, 0).is_none());
        d.write_page(1, 3, &[7u8; PAGE_SIZE], false).unwrap();
        assert_eq!(d.read_page(1, 3).unwrap()[100], 7);
        assert_eq!(d.snapshot().page_bytes(1, 2), [0u8; PAGE_SIZE]);
    }

    #[test]
    fn injected_failure_leaves_page_unwritten() {
        let d = Disk::in_memory(DiskLatency::default());
        d.inject_write_failures(1);
        assert!(d.write_page(1, 0, &[1u8; PAGE_SIZE], false).is_err());
        assert!(d.read_page(1, 0).is_none());
        d.write_page(1, 0, &[1u8; PAGE_SIZE], false).unwrap();
        assert!(d.read_page(1, 0).is_some());
    }

    #[test]
    fn directory_persists_across_open() {
        let dir = tempfile::tempdir().unwrap();
        {
            let d = Disk::open_dir(dir.path(), DiskLatency::default()).unwrap();
            d.write_page(5, 2, &[9u8; PAGE_SIZE], true).unwrap();
            d.write_size(5, 3 * 4096 - 10, true).unwrap();
        }
        let d = Disk::open_dir(dir.path(), DiskLatency::default()).unwrap();
        assert_eq!(d.size(5), 3 * 4096 - 10);
        assert_eq!(d.read_page(5, 2).unwrap()[0], 9);
        assert!(d.read_page(5, 1).is_none());
    }

    #[test]
    fn sync_latency_is_charged() {
        let d = Disk::in_memory(DiskLatency { write_us: 10, sync_write_us: 80, mode: LatencyMode::Account });
        simclock::take_ns();
        d.write_page(1, 0, &[0u8; PAGE_SIZE], true).unwrap();
        d.write_page(1, 1, &[0u8; PAGE_SIZE], false).unwrap();
        assert_eq!(simclock::take_ns(), 90_000);
    }
}
