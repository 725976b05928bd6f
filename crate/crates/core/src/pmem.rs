//! Emulated byte-addressable persistent memory with an x86-style
//! persistence model.
//!
//! Every store lands in a volatile view immediately and is tracked as a
//! pending 64-byte cacheline. `clwb` marks pending lines for write-back and
//! `sfence` drains the marked lines into the durable array. A crash keeps the
//! durable array plus, depending on the [`CrashPolicy`], some subset of the
//! pending lines. Lines are the unit of persistence, so an aligned 8-byte
//! value is never torn.
//!
//! In [`PmemMode::Eadr`] the CPU caches are inside the persistence domain:
//! stores are durable as soon as they are issued and `clwb` is a no-op.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::simclock::{self, LatencyMode};
use crate::{LINE_SIZE, PAGE_SIZE};

pub type Page = [u8; PAGE_SIZE];

/// Default cap on exhaustively enumerated crash images per crash point.
pub const DEFAULT_ENUM_CAP: usize = 1 << 12;

/// A byte address on the device, split into page index and offset.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct PmemAddr(u64);

impl PmemAddr {
    pub const NULL: PmemAddr = PmemAddr(0);

    pub const fn new(page_index: u32, offset_in_page: u16) -> Self {
        assert!((offset_in_page as usize) < PAGE_SIZE);
        PmemAddr(page_index as u64 * PAGE_SIZE as u64 + offset_in_page as u64)
    }

    pub const fn from_raw(raw: u64) -> Self {
        PmemAddr(raw)
    }

    pub const fn raw(self) -> u64 {
        self.0
    }

    pub const fn page_index(self) -> u32 {
        (self.0 / PAGE_SIZE as u64) as u32
    }

    pub const fn offset_in_page(self) -> u16 {
        (self.0 % PAGE_SIZE as u64) as u16
    }

    pub const fn is_null(self) -> bool {
        self.0 == 0
    }

    pub const fn add(self, bytes: u64) -> Self {
        PmemAddr(self.0 + bytes)
    }
}

impl fmt::Debug for PmemAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}+{}", self.page_index(), self.offset_in_page())
    }
}

impl fmt::Display for PmemAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PmemMode {
    #[default]
    Adr,
    Eadr,
}

impl std::str::FromStr for PmemMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adr" => Ok(Self::Adr),
            "eadr" => Ok(Self::Eadr),
            other => Err(format!("unknown pmem mode `{other}` (expected adr|eadr)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum PmemError {
    #[error("range {addr:#x}+{len} exceeds device capacity of {capacity} bytes")]
    OutOfRange { addr: u64, len: usize, capacity: u64 },
    #[error("atomic store of {len} bytes at {addr:#x} crosses an 8-byte boundary")]
    Misaligned { addr: u64, len: usize },
    #[error("image of {0} bytes is not a whole number of pages")]
    BadImageSize(u64),
    #[error("{0} already exists")]
    Exists(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// State of a cacheline that has been stored to but is not yet durable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineState {
    Buffered,
    FlushMarked,
}

#[derive(Debug, Clone, Copy)]
pub enum CrashPolicy {
    /// Only what was fenced survives.
    DropAllUnfenced,
    /// Every subset of pending lines, or `cap` seeded random subsets when
    /// there are more than `cap`.
    EnumerateSubsets { cap: usize, seed: u64 },
    /// One seeded random subset.
    RandomSubset { seed: u64 },
}

/// Read access shared by the live device and durable images.
pub trait PmemRead {
    fn capacity_bytes(&self) -> u64;

    fn read_into(&self, addr: u64, buf: &mut [u8]) -> Result<(), PmemError>;

    fn read_u64(&self, addr: u64) -> Result<u64, PmemError> {
        let mut b = [0u8; 8];
        self.read_into(addr, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn read_slot(&self, addr: u64) -> Result<[u8; LINE_SIZE], PmemError> {
        let mut b = [0u8; LINE_SIZE];
        self.read_into(addr, &mut b)?;
        Ok(b)
    }

    fn capacity_pages(&self) -> u32 {
        (self.capacity_bytes() / PAGE_SIZE as u64) as u32
    }
}

fn check_range(addr: u64, len: usize, capacity: u64) -> Result<(), PmemError> {
    match addr.checked_add(len as u64) {
        Some(end) if end <= capacity => Ok(()),
        _ => Err(PmemError::OutOfRange { addr, len, capacity }),
    }
}

fn zero_page() -> Arc<Page> {
    Arc::new([0u8; PAGE_SIZE])
}

/// A durable device image: what a crash leaves behind.
///
/// Pages are shared copy-on-write, so cloning an image is cheap.
#[derive(Clone)]
pub struct PmemImage {
    pages: Vec<Arc<Page>>,
}

impl PmemImage {
    pub fn zeroed(pages: u32) -> Self {
        let zero = zero_page();
        PmemImage { pages: vec![zero; pages as usize] }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PmemError> {
        if bytes.len() % PAGE_SIZE != 0 {
            return Err(PmemError::BadImageSize(bytes.len() as u64));
        }
        let zero = zero_page();
        let pages = bytes
            .chunks_exact(PAGE_SIZE)
            .map(|chunk| {
                if chunk.iter().all(|&b| b == 0) {
                    zero.clone()
                } else {
                    let mut p = [0u8; PAGE_SIZE];
                    p.copy_from_slice(chunk);
                    Arc::new(p)
                }
            })
            .collect();
        Ok(PmemImage { pages })
    }

    pub fn load(path: &Path) -> Result<Self, PmemError> {
        let mut f = File::open(path)?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Writes the image verbatim (raw page array).
    pub fn save(&self, path: &Path) -> Result<(), PmemError> {
        let mut f = File::create(path)?;
        for p in &self.pages {
            f.write_all(&p[..])?;
        }
        f.sync_all()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pages.len() * PAGE_SIZE);
        for p in &self.pages {
            out.extend_from_slice(&p[..]);
        }
        out
    }

    pub fn page(&self, index: u32) -> &Page {
        &self.pages[index as usize]
    }

    pub fn write(&mut self, addr: u64, bytes: &[u8]) -> Result<(), PmemError> {
        check_range(addr, bytes.len(), self.capacity_bytes())?;
        let mut done = 0;
        while done < bytes.len() {
            let a = addr as usize + done;
            let (pi, off) = (a / PAGE_SIZE, a % PAGE_SIZE);
            let n = (PAGE_SIZE - off).min(bytes.len() - done);
            Arc::make_mut(&mut self.pages[pi])[off..off + n].copy_from_slice(&bytes[done..done + n]);
            done += n;
        }
        Ok(())
    }

    pub fn write_u64(&mut self, addr: u64, value: u64) -> Result<(), PmemError> {
        self.write(addr, &value.to_le_bytes())
    }
}

impl PmemRead for PmemImage {
    fn capacity_bytes(&self) -> u64 {
        (self.pages.len() * PAGE_SIZE) as u64
    }

    fn read_into(&self, addr: u64, buf: &mut [u8]) -> Result<(), PmemError> {
        check_range(addr, buf.len(), self.capacity_bytes())?;
        let mut done = 0;
        while done < buf.len() {
            let a = addr as usize + done;
            let (pi, off) = (a / PAGE_SIZE, a % PAGE_SIZE);
            let n = (PAGE_SIZE - off).min(buf.len() - done);
            buf[done..done + n].copy_from_slice(&self.pages[pi][off..off + n]);
            done += n;
        }
        Ok(())
    }
}

impl fmt::Debug for PmemImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PmemImage").field("pages", &self.pages.len()).finish()
    }
}

/// Lines stored to but not yet durable: a state byte per line plus the
/// list of non-clean lines, so a fence only visits those.
struct PendingLines {
    state: Vec<u8>,
    lines: Vec<u64>,
}

const CLEAN: u8 = 0;
const BUFFERED: u8 = 1;
const MARKED: u8 = 2;

impl PendingLines {
    fn new(capacity: u64) -> Self {
        PendingLines { state: vec![CLEAN; (capacity / LINE_SIZE as u64) as usize], lines: Vec::new() }
    }

    fn buffer(&mut self, line: u64) {
        let s = &mut self.state[line as usize];
        if *s == CLEAN {
            self.lines.push(line);
        }
        *s = BUFFERED;
    }

    fn mark(&mut self, first: u64, last: u64) -> u64 {
        let mut n = 0;
        for s in &mut self.state[first as usize..=last as usize] {
            if *s != CLEAN {
                *s = MARKED;
                n += 1;
            }
        }
        n
    }

    /// Removes and returns the flush-marked lines.
    fn take_marked(&mut self) -> Vec<u64> {
        let state = &mut self.state;
        let mut marked = Vec::new();
        self.lines.retain(|&l| {
            if state[l as usize] == MARKED {
                state[l as usize] = CLEAN;
                marked.push(l);
                false
            } else {
                true
            }
        });
        marked
    }

    /// Line index and state, in address order.
    fn sorted(&self) -> Vec<(u64, LineState)> {
        let mut v: Vec<(u64, LineState)> = self
            .lines
            .iter()
            .map(|&l| (l, if self.state[l as usize] == MARKED { LineState::FlushMarked } else { LineState::Buffered }))
            .collect();
        v.sort_unstable_by_key(|e| e.0);
        v
    }

    fn len(&self) -> usize {
        self.lines.len()
    }

    fn clear(&mut self) {
        for &l in &self.lines {
            self.state[l as usize] = CLEAN;
        }
        self.lines.clear();
    }
}

struct Inner {
    visible: Vec<u8>,
    durable: Vec<Arc<Page>>,
    pending: PendingLines,
    fences: u64,
}

impl Inner {
    fn persist_line(&mut self, line: u64) {
        let a = line as usize * LINE_SIZE;
        let (pi, off) = (a / PAGE_SIZE, a % PAGE_SIZE);
        let page = Arc::make_mut(&mut self.durable[pi]);
        page[off..off + LINE_SIZE].copy_from_slice(&self.visible[a..a + LINE_SIZE]);
    }

    fn persist_range(&mut self, addr: u64, len: usize) {
        let mut done = 0;
        while done < len {
            let a = addr as usize + done;
            let (pi, off) = (a / PAGE_SIZE, a % PAGE_SIZE);
            let n = (PAGE_SIZE - off).min(len - done);
            Arc::make_mut(&mut self.durable[pi])[off..off + n].copy_from_slice(&self.visible[a..a + n]);
            done += n;
        }
    }
}

/// Read-only view of the device handed to crash hooks.
pub struct CrashView<'a> {
    inner: &'a Inner,
}

impl CrashView<'_> {
    /// Number of completed fences.
    pub fn fence_count(&self) -> u64 {
        self.inner.fences
    }

    pub fn pending_lines(&self) -> Vec<(u64, LineState)> {
        self.inner.pending.sorted().into_iter().map(|(l, s)| (l * LINE_SIZE as u64, s)).collect()
    }

    pub fn durable_image(&self) -> PmemImage {
        PmemImage { pages: self.inner.durable.clone() }
    }

    pub fn images(&self, policy: CrashPolicy) -> CrashImages {
        let lines: Vec<(u64, [u8; LINE_SIZE])> = self
            .inner
            .pending
            .sorted()
            .into_iter()
            .map(|(l, _)| {
                let a = l as usize * LINE_SIZE;
                let mut b = [0u8; LINE_SIZE];
                b.copy_from_slice(&self.inner.visible[a..a + LINE_SIZE]);
                (l * LINE_SIZE as u64, b)
            })
            .collect();
        let k = lines.len();
        let selections = match policy {
            CrashPolicy::DropAllUnfenced => vec![vec![false; k]],
            CrashPolicy::RandomSubset { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                vec![(0..k).map(|_| rng.gen_bool(0.5)).collect()]
            }
            CrashPolicy::EnumerateSubsets { cap, seed } => {
                if k < 63 && (1usize << k) <= cap {
                    (0..1u64 << k).map(|m| (0..k).map(|i| m >> i & 1 == 1).collect()).collect()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    (0..cap).map(|_| (0..k).map(|_| rng.gen_bool(0.5)).collect()).collect()
                }
            }
        };
        CrashImages {
            base: self.inner.durable.clone(),
            lines,
            selections: selections.into_iter(),
        }
    }
}

/// Lazily materialized crash images.
pub struct CrashImages {
    base: Vec<Arc<Page>>,
    lines: Vec<(u64, [u8; LINE_SIZE])>,
    selections: std::vec::IntoIter<Vec<bool>>,
}

impl CrashImages {
    pub fn pending_count(&self) -> usize {
        self.lines.len()
    }
}

impl Iterator for CrashImages {
    type Item = PmemImage;

    fn next(&mut self) -> Option<PmemImage> {
        let sel = self.selections.next()?;
        let mut img = PmemImage { pages: self.base.clone() };
        for ((addr, bytes), keep) in self.lines.iter().zip(sel) {
            if keep {
                img.write(*addr, bytes).expect("pending line within capacity");
            }
        }
        Some(img)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.selections.size_hint()
    }
}

pub type FenceHook = Box<dyn FnMut(&CrashView<'_>) + Send>;

#[derive(Debug, Default)]
struct Counters {
    stores: AtomicU64,
    bytes_stored: AtomicU64,
    lines_flushed: AtomicU64,
    fences: AtomicU64,
    loads: AtomicU64,
    bytes_loaded: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PmemStats {
    pub stores: u64,
    pub bytes_stored: u64,
    pub lines_flushed: u64,
    pub fences: u64,
    pub loads: u64,
    pub bytes_loaded: u64,
}

/// The emulated NVM device.
pub struct PmemDevice {
    inner: Mutex<Inner>,
    hook: Mutex<Option<FenceHook>>,
    mode: PmemMode,
    capacity: u64,
    line_latency_ns: u64,
    latency_mode: LatencyMode,
    counters: Counters,
    path: Option<PathBuf>,
}

impl PmemDevice {
    pub fn new(pages: u32, mode: PmemMode) -> Self {
        Self::from_image(PmemImage::zeroed(pages), mode)
    }

    pub fn from_image(image: PmemImage, mode: PmemMode) -> Self {
        let capacity = image.capacity_bytes();
        let visible = image.to_bytes();
        PmemDevice {
            inner: Mutex::new(Inner { visible, durable: image.pages, pending: PendingLines::new(capacity), fences: 0 }),
            hook: Mutex::new(None),
            mode,
            capacity,
            line_latency_ns: 0,
            latency_mode: LatencyMode::Off,
            counters: Counters::default(),
            path: None,
        }
    }

    /// Creates a zeroed image file of `pages` pages without loading it.
    pub fn create_file(path: &Path, pages: u32, force: bool) -> Result<(), PmemError> {
        if path.exists() && !force {
            return Err(PmemError::Exists(path.to_path_buf()));
        }
        let f = OpenOptions::new().write(true).create(true).truncate(true).open(path)?;
        f.set_len(pages as u64 * PAGE_SIZE as u64)?;
        f.sync_all()?;
        Ok(())
    }

    /// Opens a file-backed device. The file content is the durable state.
    pub fn open_file(path: &Path, mode: PmemMode) -> Result<Self, PmemError> {
        let image = PmemImage::load(path)?;
        let mut dev = Self::from_image(image, mode);
        dev.path = Some(path.to_path_buf());
        Ok(dev)
    }

    pub fn with_latency(mut self, line_latency_ns: u64, mode: LatencyMode) -> Self {
        self.line_latency_ns = line_latency_ns;
        self.latency_mode = mode;
        self
    }

    pub fn mode(&self) -> PmemMode {
        self.mode
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Writes the durable state back to the backing file, if any.
    pub fn save(&self) -> Result<(), PmemError> {
        if let Some(p) = &self.path {
            self.durable_image().save(p)?;
        }
        Ok(())
    }

    pub fn store(&self, addr: PmemAddr, bytes: &[u8]) -> Result<(), PmemError> {
        let a = addr.raw();
        check_range(a, bytes.len(), self.capacity)?;
        if bytes.is_empty() {
            return Ok(());
        }
        let first = a / LINE_SIZE as u64;
        let last = (a + bytes.len() as u64 - 1) / LINE_SIZE as u64;
        {
            let mut inner = self.inner.lock();
            inner.visible[a as usize..a as usize + bytes.len()].copy_from_slice(bytes);
            match self.mode {
                PmemMode::Eadr => inner.persist_range(a, bytes.len()),
                PmemMode::Adr => {
                    for line in first..=last {
                        // A store after clwb re-dirties the line; the fence
                        // no longer covers it.
                        inner.pending.buffer(line);
                    }
                }
            }
        }
        self.counters.stores.fetch_add(1, Ordering::Relaxed);
        self.counters.bytes_stored.fetch_add(bytes.len() as u64, Ordering::Relaxed);
        simclock::charge(self.latency_mode, (last - first + 1) * self.line_latency_ns);
        Ok(())
    }

    /// A store the caller relies on being single-copy atomic.
    pub fn store_atomic(&self, addr: PmemAddr, bytes: &[u8]) -> Result<(), PmemError> {
        let a = addr.raw();
        if bytes.len() > 8 || (a % 8) + bytes.len() as u64 > 8 {
            return Err(PmemError::Misaligned { addr: a, len: bytes.len() });
        }
        self.store(addr, bytes)
    }

    pub fn store_u64(&self, addr: PmemAddr, value: u64) -> Result<(), PmemError> {
        self.store_atomic(addr, &value.to_le_bytes())
    }

    pub fn clwb(&self, addr: PmemAddr, len: usize) -> Result<(), PmemError> {
        let a = addr.raw();
        check_range(a, len, self.capacity)?;
        if len == 0 || self.mode == PmemMode::Eadr {
            return Ok(());
        }
        let first = a / LINE_SIZE as u64;
        let last = (a + len as u64 - 1) / LINE_SIZE as u64;
        let mut inner = self.inner.lock();
        let n = inner.pending.mark(first, last);
        drop(inner);
        self.counters.lines_flushed.fetch_add(n, Ordering::Relaxed);
        Ok(())
    }

    /// Drains every flush-marked line. The fence hook, if installed, observes
    /// the device just before the drain.
    pub fn sfence(&self) {
        let mut inner = self.inner.lock();
        if let Some(hook) = self.hook.lock().as_mut() {
            hook(&CrashView { inner: &inner });
        }
        for line in inner.pending.take_marked() {
            inner.persist_line(line);
        }
        inner.fences += 1;
        drop(inner);
        self.counters.fences.fetch_add(1, Ordering::Relaxed);
    }

    /// Runs the fence hook against the current state without fencing.
    pub fn capture(&self) {
        let inner = self.inner.lock();
        if let Some(hook) = self.hook.lock().as_mut() {
            hook(&CrashView { inner: &inner });
        }
    }

    pub fn set_fence_hook(&self, hook: Option<FenceHook>) {
        *self.hook.lock() = hook;
    }

    pub fn load(&self, addr: PmemAddr, buf: &mut [u8]) -> Result<(), PmemError> {
        self.read_into(addr.raw(), buf)
    }

    pub fn load_u64(&self, addr: PmemAddr) -> Result<u64, PmemError> {
        self.read_u64(addr.raw())
    }

    /// Images a crash at this instant would leave, per `policy`.
    /// The caller must have quiesced all writers.
    pub fn crash(&self, policy: CrashPolicy) -> CrashImages {
        let inner = self.inner.lock();
        CrashView { inner: &inner }.images(policy)
    }

    pub fn durable_image(&self) -> PmemImage {
        PmemImage { pages: self.inner.lock().durable.clone() }
    }

    /// Replaces the whole device content (visible and durable) with `image`,
    /// discarding pending lines. Used when restarting on a crash image.
    pub fn reset_to(&self, image: PmemImage) {
        assert_eq!(image.capacity_bytes(), self.capacity);
        let mut inner = self.inner.lock();
        inner.visible = image.to_bytes();
        inner.durable = image.pages;
        inner.pending.clear();
    }

    pub fn fence_count(&self) -> u64 {
        self.inner.lock().fences
    }

    pub fn pending_count(&self) -> usize {
        self.inner.lock().pending.len()
    }

    pub fn stats(&self) -> PmemStats {
        let c = &self.counters;
        PmemStats {
            stores: c.stores.load(Ordering::Relaxed),
            bytes_stored: c.bytes_stored.load(Ordering::Relaxed),
            lines_flushed: c.lines_flushed.load(Ordering::Relaxed),
            fences: c.fences.load(Ordering::Relaxed),
            loads: c.loads.load(Ordering::Relaxed),
            bytes_loaded: c.bytes_loaded.load(Ordering::Relaxed),
        }
    }
}

impl PmemRead for PmemDevice {
    fn capacity_bytes(&self) -> u64 {
        self.capacity
    }

    fn read_into(&self, addr: u64, buf: &mut [u8]) -> Result<(), PmemError> {
        check_range(addr, buf.len(), self.capacity)?;
        let inner = self.inner.lock();
        buf.copy_from_slice(&inner.visible[addr as usize..addr as usize + buf.len()]);
        drop(inner);
        self.counters.loads.fetch_add(1, Ordering::Relaxed);
        self.counters.bytes_loaded.fetch_add(buf.len() as u64, Ordering::Relaxed);
        Ok(())
    }
}

impl fmt::Debug for PmemDevice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PmemDevice")
            .field("capacity", &self.capacity)
            .field("mode", &self.mode)
            .finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn read(img: &PmemImage, addr: u64, len: usize) -> Vec<u8> {
        let mut b = vec![0u8; len];
        img.read_into(addr, &mut b).unwrap();
        b
    }

    const P5: PmemAddr = PmemAddr::new(5, 0);

    #[test]
    fn addr_split() {
        let a = PmemAddr::new(3, 100);
        assert_eq!(a.raw(), 3 * 4096 + 100);
        assert_eq!((a.page_index(), a.offset_in_page()), (3, 100));
    }

    #[test]
    fn unflushed_store_is_lost() {
        let dev = PmemDevice::new(8, PmemMode::Adr);
        dev.store(P5, &[7u8; 64]).unwrap();
        let mut buf = [0u8; 64];
        dev.load(P5, &mut buf).unwrap();
        assert_eq!(buf, [7u8; 64]);
        let img = dev.crash(CrashPolicy::DropAllUnfenced).next().unwrap();
        assert_eq!(read(&img, P5.raw(), 64), vec![0u8; 64]);
    }

    #[test]
    fn flush_and_fence_persist() {
        let dev = PmemDevice::new(8, PmemMode::Adr);
        dev.store(P5, &[7u8; 64]).unwrap();
        dev.clwb(P5, 64).unwrap();
        dev.sfence();
        let img = dev.crash(CrashPolicy::DropAllUnfenced).next().unwrap();
        assert_eq!(read(&img, P5.raw(), 64), vec![7u8; 64]);
        assert_eq!(dev.pending_count(), 0);
    }

    #[test]
    fn eadr_store_is_durable() {
        let dev = PmemDevice::new(8, PmemMode::Eadr);
        dev.store(P5, &[9u8; 64]).unwrap();
        let img = dev.crash(CrashPolicy::DropAllUnfenced).next().unwrap();
        assert_eq!(read(&img, P5.raw(), 64), vec![9u8; 64]);
    }

    #[test]
    fn clwb_of_clean_line_is_noop() {
        let dev = PmemDevice::new(8, PmemMode::Adr);
        dev.clwb(P5, 128).unwrap();
        assert_eq!(dev.pending_count(), 0);
        assert_eq!(dev.stats().lines_flushed, 0);
    }

    #[test]
    fn flushed_unfenced_line_enumerates_both_outcomes() {
        let dev = PmemDevice::new(8, PmemMode::Adr);
        dev.store(P5, &[1u8; 64]).unwrap();
        dev.clwb(P5, 64).unwrap();
        let images: Vec<_> = dev.crash(CrashPolicy::EnumerateSubsets { cap: DEFAULT_ENUM_CAP, seed: 0 }).collect();
        let outcomes: Vec<_> = images.iter().map(|i| read(i, P5.raw(), 1)[0]).collect();
        assert_eq!(outcomes, vec![0, 1]);
    }

    #[test]
    fn fence_on_first_line_only() {
        let dev = PmemDevice::new(8, PmemMode::Adr);
        let second = PmemAddr::new(5, 64);
        dev.store(P5, &[1u8; 64]).unwrap();
        dev.store(second, &[2u8; 64]).unwrap();
        dev.clwb(P5, 64).unwrap();
        dev.sfence();
        let images: Vec<_> = dev.crash(CrashPolicy::EnumerateSubsets { cap: 16, seed: 0 }).collect();
        assert_eq!(images.len(), 2);
        for img in &images {
            assert_eq!(read(img, P5.raw(), 1)[0], 1);
        }
        let seconds: Vec<_> = images.iter().map(|i| read(i, second.raw(), 1)[0]).collect();
        assert_eq!(seconds, vec![0, 2]);
    }

    #[test]
    fn fence_orders_later_store() {
        let dev = PmemDevice::new(8, PmemMode::Adr);
        let other = PmemAddr::new(6, 0);
        dev.store(P5, &[1u8; 8]).unwrap();
        dev.clwb(P5, 8).unwrap();
        dev.sfence();
        dev.store(other, &[2u8; 8]).unwrap();
        for img in dev.crash(CrashPolicy::EnumerateSubsets { cap: 16, seed: 1 }) {
            if read(&img, other.raw(), 1)[0] == 2 {
                assert_eq!(read(&img, P5.raw(), 1)[0], 1);
            }
        }
    }

    #[test]
    fn enumerate_counts_and_cap() {
        let dev = PmemDevice::new(8, PmemMode::Adr);
        for i in 0..5u16 {
            dev.store(PmemAddr::new(2, i * 64), &[i as u8 + 1]).unwrap();
        }
        assert_eq!(dev.crash(CrashPolicy::EnumerateSubsets { cap: 32, seed: 0 }).count(), 32);
        assert_eq!(dev.crash(CrashPolicy::EnumerateSubsets { cap: 8, seed: 0 }).count(), 8);
        assert_eq!(dev.crash(CrashPolicy::RandomSubset { seed: 3 }).count(), 1);
    }

    #[test]
    fn empty_pending_crash_equals_durable() {
        let dev = PmemDevice::new(4, PmemMode::Adr);
        let imgs: Vec<_> = dev.crash(CrashPolicy::EnumerateSubsets { cap: 16, seed: 0 }).collect();
        assert_eq!(imgs.len(), 1);
        assert_eq!(imgs[0].to_bytes(), dev.durable_image().to_bytes());
    }

    #[test]
    fn out_of_range_and_misaligned() {
        let dev = PmemDevice::new(1, PmemMode::Adr);
        assert!(matches!(dev.store(PmemAddr::new(0, 4090), &[0; 8]), Err(PmemError::OutOfRange { .. })));
        assert!(matches!(dev.clwb(PmemAddr::new(1, 0), 1), Err(PmemError::OutOfRange { .. })));
        assert!(matches!(dev.store_u64(PmemAddr::new(0, 4), 1), Err(PmemError::Misaligned { .. })));
        assert!(dev.store_atomic(PmemAddr::new(0, 4), &[1, 2]).is_ok());
    }

    #[test]
    fn store_after_clwb_rebuffers_line() {
        let dev = PmemDevice::new(2, PmemMode::Adr);
        dev.store(PmemAddr::new(1, 0), &[1]).unwrap();
        dev.clwb(PmemAddr::new(1, 0), 1).unwrap();
        dev.store(PmemAddr::new(1, 1), &[2]).unwrap();
        dev.sfence();
        assert_eq!(dev.pending_count(), 1);
    }

    #[test]
    fn hook_sees_state_before_drain() {
        let dev = PmemDevice::new(2, PmemMode::Adr);
        let seen = Arc::new(Mutex::new(Vec::new()));
        let s = seen.clone();
        dev.set_fence_hook(Some(Box::new(move |v: &CrashView<'_>| {
            s.lock().push((v.fence_count(), v.pending_lines().len()));
        })));
        dev.store(PmemAddr::new(1, 0), &[1; 128]).unwrap();
        dev.clwb(PmemAddr::new(1, 0), 128).unwrap();
        dev.sfence();
        dev.sfence();
        assert_eq!(*seen.lock(), vec![(0, 2), (1, 0)]);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nvm.img");
        PmemDevice::create_file(&path, 4, false).unwrap();
        assert!(matches!(PmemDevice::create_file(&path, 4, false), Err(PmemError::Exists(_))));
        let dev = PmemDevice::open_file(&path, PmemMode::Adr).unwrap();
        dev.store(PmemAddr::new(2, 8), &[0xab; 8]).unwrap();
        dev.clwb(PmemAddr::new(2, 8), 8).unwrap();
        dev.sfence();
        dev.store(PmemAddr::new(3, 0), &[0xcd; 8]).unwrap();
        dev.save().unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 4 * PAGE_SIZE);
        assert_eq!(&bytes[2 * PAGE_SIZE + 8..2 * PAGE_SIZE + 16], &[0xab; 8]);
        assert_eq!(&bytes[3 * PAGE_SIZE..3 * PAGE_SIZE + 8], &[0; 8]);
    }

    proptest! {
        #[test]
        fn no_torn_u64_and_fence_soundness(ops in proptest::collection::vec((0u16..64, any::<u64>(), any::<bool>(), any::<bool>()), 1..40), seed: u64) {
            let dev = PmemDevice::new(1, PmemMode::Adr);
            let mut history: Vec<Vec<u64>> = vec![vec![0]; 512];
            let mut fenced_floor = vec![0u64; 512];
            for (slot, value, flush, fence) in ops {
                let addr = PmemAddr::new(0, slot * 8);
                dev.store_u64(addr, value).unwrap();
                history[slot as usize].push(value);
                if flush { dev.clwb(addr, 8).unwrap(); }
                if fence {
                    dev.sfence();
                    let img = dev.crash(CrashPolicy::DropAllUnfenced).next().unwrap();
                    for (i, f) in fenced_floor.iter_mut().enumerate() {
                        *f = img.read_u64(i as u64 * 8).unwrap();
                    }
                }
            }
            for img in dev.crash(CrashPolicy::EnumerateSubsets { cap: 64, seed }) {
                for i in 0..512usize {
                    let v = img.read_u64(i as u64 * 8).unwrap();
                    prop_assert!(history[i].contains(&v), "torn or invented value");
                    // persistence monotonicity: anything durable at the last
                    // fence is either still there or overwritten by a later store
                    let pos_floor = history[i].iter().rposition(|&h| h == fenced_floor[i]).unwrap();
                    let pos_v = history[i].iter().rposition(|&h| h == v).unwrap();
                    prop_assert!(pos_v >= pos_floor || v == fenced_floor[i]);
                }
            }
        }
    }
}
