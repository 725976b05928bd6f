//! Brute-force reference model of what a crash may legally leave behind.
//!
//! The oracle consumes only the engine's event trace. Per file page it keeps
//! the last disk checkpoint and the committed sync events that no write-back
//! record has expired yet; the predicted recovered page is the checkpoint
//! with those events laid over it in commit order.
//!
//! Two things are uncertain at a crash:
//! * a commit (or write-back record) whose final fence is the crash fence
//!   may or may not have become durable;
//! * between a page's disk checkpoint and its write-back record the older
//!   events may or may not be expired.
//!
//! [`Oracle::predict`] therefore returns a small set of joint alternatives.
//! A recovered state must match one alternative on every page at once, so a
//! half-applied transaction is never admissible.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::disk::DiskState;
use crate::pmem::Page;
use crate::trace::{SyncMode, TraceEvent, TraceRecord};
use crate::PAGE_SIZE;

const PS: u64 = PAGE_SIZE as u64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("trace out of order: fence {got} after {last}")]
    OutOfOrder { last: u64, got: u64 },
    #[error("inconsistent trace: {0}")]
    Inconsistent(String),
}

#[derive(Clone)]
enum PageEvent {
    Range { off: usize, bytes: Arc<[u8]> },
    Full(Arc<Page>),
}

#[derive(Clone, Default)]
struct OFile {
    visible: BTreeMap<u64, Arc<Page>>,
    size: u64,
    ckpt: BTreeMap<u64, Arc<Page>>,
    ckpt_size: u64,
    events: BTreeMap<u64, Vec<PageEvent>>,
    committed_size: u64,
    pred: BTreeMap<u64, Arc<Page>>,
}

fn zero_page() -> Arc<Page> {
    Arc::new([0u8; PAGE_SIZE])
}

impl OFile {
    fn write(&mut self, zero: &Arc<Page>, offset: u64, data: &[u8]) {
        for (p, off, n, src) in chunks(offset, data.len() as u64) {
            let page = self.visible.entry(p).or_insert_with(|| zero.clone());
            Arc::make_mut(page)[off..off + n].copy_from_slice(&data[src..src + n]);
        }
        self.size = self.size.max(offset + data.len() as u64);
    }

    /// Pages touched by committing a sync of this kind.
    fn commit(&mut self, zero: &Arc<Page>, mode: SyncMode, offset: u64, len: u64, full: &[u64]) -> Vec<u64> {
        let mut touched = Vec::new();
        match mode {
            SyncMode::OSync => {
                for (p, off, n, _) in chunks(offset, len) {
                    let page = self.visible.get(&p).cloned().unwrap_or_else(|| zero.clone());
                    let bytes: Arc<[u8]> = Arc::from(&page[off..off + n]);
                    self.events.entry(p).or_default().push(PageEvent::Range { off, bytes });
                    touched.push(p);
                }
            }
            SyncMode::Fsync | SyncMode::Fdatasync => {
                for &p in full {
                    let page = self.visible.get(&p).cloned().unwrap_or_else(|| zero.clone());
                    // a full image supersedes everything before it
                    self.events.insert(p, vec![PageEvent::Full(page)]);
                    touched.push(p);
                }
            }
        }
        self.committed_size = self.committed_size.max(self.size);
        for &p in &touched {
            self.recompute(zero, p);
        }
        touched
    }

    /// Checks that a committed sync left every byte in its scope durable.
    fn check_synced(&self, zero: &Arc<Page>, ino: u64, mode: SyncMode, offset: u64, len: u64) -> Result<(), OracleError> {
        let scope: Vec<(u64, usize, usize)> = match mode {
            SyncMode::OSync => chunks(offset, len).map(|(p, off, n, _)| (p, off, n)).collect(),
            SyncMode::Fsync | SyncMode::Fdatasync => self.visible.keys().map(|&p| (p, 0, PAGE_SIZE)).collect(),
        };
        for (p, off, n) in scope {
            let want = self.visible.get(&p).unwrap_or(zero);
            let got = self.pred.get(&p).or_else(|| self.ckpt.get(&p)).unwrap_or(zero);
            if want[off..off + n] != got[off..off + n] {
                return Err(OracleError::Inconsistent(format!("ino {ino}: page {p} not durable after {mode:?} commit")));
            }
        }
        Ok(())
    }

    fn expire(&mut self, zero: &Arc<Page>, p: u64) {
        self.events.remove(&p);
        self.recompute(zero, p);
    }

    fn checkpoint(&mut self, zero: &Arc<Page>, p: u64) {
        let v = self.visible.get(&p).cloned().unwrap_or_else(|| zero.clone());
        self.ckpt.insert(p, v);
        self.recompute(zero, p);
    }

    fn recompute(&mut self, zero: &Arc<Page>, p: u64) {
        let events = self.events.get(&p).map(Vec::as_slice).unwrap_or(&[]);
        let start = events.iter().rposition(|e| matches!(e, PageEvent::Full(_)));
        let mut base = match start {
            Some(i) => match &events[i] {
                PageEvent::Full(f) => f.clone(),
                PageEvent::Range { .. } => unreachable!(),
            },
            None => self.ckpt.get(&p).cloned().unwrap_or_else(|| zero.clone()),
        };
        for e in &events[start.map_or(0, |i| i + 1)..] {
            if let PageEvent::Range { off, bytes } = e {
                Arc::make_mut(&mut base)[*off..*off + bytes.len()].copy_from_slice(bytes);
            }
        }
        self.pred.insert(p, base);
    }

    fn predicted_size(&self) -> u64 {
        self.ckpt_size.max(self.committed_size)
    }
}

/// Splits `[offset, offset+len)` into per-page pieces:
/// (page, offset in page, length, offset in source).
fn chunks(offset: u64, len: u64) -> impl Iterator<Item = (u64, usize, usize, usize)> {
    let end = offset + len;
    let mut pos = offset;
    std::iter::from_fn(move || {
        if pos >= end {
            return None;
        }
        let p = pos / PS;
        let off = (pos % PS) as usize;
        let n = ((PS - off as u64).min(end - pos)) as usize;
        let item = (p, off, n, (pos - offset) as usize);
        pos += n as u64;
        Some(item)
    })
}

#[derive(Clone, Debug)]
enum Pending {
    Commit { ino: u64, fence: u64, mode: SyncMode, offset: u64, len: u64, full: Arc<[u64]> },
    Record { ino: u64, page: u64, fence: u64 },
}

#[derive(Clone, Debug)]
enum Effect {
    Commit { ino: u64, mode: SyncMode, offset: u64, len: u64, full: Arc<[u64]> },
    Expire { ino: u64, page: u64 },
}

impl Effect {
    fn ino(&self) -> u64 {
        match *self {
            Effect::Commit { ino, .. } | Effect::Expire { ino, .. } => ino,
        }
    }
}

pub struct Oracle {
    files: BTreeMap<u64, OFile>,
    pending: Option<Pending>,
    /// Page checkpointed to disk whose older events await a record.
    window: Option<(u64, u64)>,
    last_fence: u64,
    zero: Arc<Page>,
    applied: usize,
}

impl Default for Oracle {
    fn default() -> Self {
        Self::new()
    }
}

impl Oracle {
    pub fn new() -> Self {
        Oracle { files: BTreeMap::new(), pending: None, window: None, last_fence: 0, zero: zero_page(), applied: 0 }
    }

    /// Number of records consumed so far.
    pub fn applied(&self) -> usize {
        self.applied
    }

    pub fn apply_all<'a>(&mut self, recs: impl IntoIterator<Item = &'a TraceRecord>) -> Result<(), OracleError> {
        recs.into_iter().try_for_each(|r| self.apply(r))
    }

    pub fn apply(&mut self, rec: &TraceRecord) -> Result<(), OracleError> {
        if rec.fence < self.last_fence {
            return Err(OracleError::OutOfOrder { last: self.last_fence, got: rec.fence });
        }
        self.last_fence = rec.fence;
        self.applied += 1;
        if let Some(p) = self.pending.take() {
            match p {
                Pending::Commit { ino, mode, offset, len, full, .. } => {
                    self.run(Effect::Commit { ino, mode, offset, len, full });
                    self.files[&ino].check_synced(&self.zero, ino, mode, offset, len)?;
                }
                Pending::Record { ino, page, .. } => self.run(Effect::Expire { ino, page }),
            }
        }
        if let TraceEvent::WbRecordCommit { ino, offset, .. } = rec.event {
            if self.window == Some((ino, offset / PS)) {
                self.window = None;
                self.pending = Some(Pending::Record { ino, page: offset / PS, fence: rec.fence });
                return Ok(());
            }
        }
        if let Some((ino, page)) = self.window.take() {
            // the record should have followed its checkpoint immediately
            self.run(Effect::Expire { ino, page });
        }
        let zero = self.zero.clone();
        match rec.event {
            TraceEvent::Write { ino, offset, len, ref data } => {
                if data.len() as u64 != len {
                    return Err(OracleError::Inconsistent(format!("write len {len} with {} data bytes", data.len())));
                }
                self.files.entry(ino).or_default().write(&zero, offset, data);
            }
            TraceEvent::SyncCommit { ino, mode, offset, len, size, ref pages, .. } => {
                let f = self.files.entry(ino).or_default();
                if size != f.size {
                    return Err(OracleError::Inconsistent(format!("ino {ino}: sync of size {size}, visible size {}", f.size)));
                }
                self.pending = Some(Pending::Commit { ino, fence: rec.fence, mode, offset, len, full: pages.as_slice().into() });
            }
            TraceEvent::WritebackDurable { ino, offset, len, size } => {
                let f = self.files.entry(ino).or_default();
                if len == 0 {
                    if size > f.size {
                        return Err(OracleError::Inconsistent(format!("ino {ino}: size checkpoint {size} beyond {}", f.size)));
                    }
                    f.ckpt_size = f.ckpt_size.max(size);
                } else {
                    if offset % PS != 0 || len != PS {
                        return Err(OracleError::Inconsistent(format!("write-back of partial page at {offset}+{len}")));
                    }
                    let p = offset / PS;
                    f.checkpoint(&zero, p);
                    if f.events.get(&p).is_some_and(|e| !e.is_empty()) {
                        self.window = Some((ino, p));
                    }
                }
            }
            TraceEvent::WbRecordCommit { ino, offset, .. } => {
                self.files.entry(ino).or_default();
                self.pending = Some(Pending::Record { ino, page: offset / PS, fence: rec.fence });
            }
            TraceEvent::CrashPoint => {}
        }
        Ok(())
    }

    fn run(&mut self, e: Effect) {
        let zero = self.zero.clone();
        let f = self.files.entry(e.ino()).or_default();
        match e {
            Effect::Commit { mode, offset, len, full, .. } => {
                f.commit(&zero, mode, offset, len, &full);
            }
            Effect::Expire { page, .. } => f.expire(&zero, page),
        }
    }

    /// Program-visible bytes (what a read must return).
    pub fn read(&self, ino: u64, offset: u64, len: usize) -> Vec<u8> {
        let mut out = vec![0u8; len];
        let Some(f) = self.files.get(&ino) else { return out };
        for (p, off, n, dst) in chunks(offset, len as u64) {
            if let Some(page) = f.visible.get(&p) {
                out[dst..dst + n].copy_from_slice(&page[off..off + n]);
            }
        }
        out
    }

    pub fn visible_size(&self, ino: u64) -> u64 {
        self.files.get(&ino).map_or(0, |f| f.size)
    }

    /// Admissible post-crash states for a crash at fence `crash_fence`
    /// (`None` for a crash between operations, with no fence in flight).
    pub fn predict(&self, crash_fence: Option<u64>) -> Prediction<'_> {
        let mut alts: Vec<Vec<Effect>> = vec![vec![]];
        match self.pending.clone() {
            Some(Pending::Commit { ino, fence, mode, offset, len, full }) => {
                let e = Effect::Commit { ino, mode, offset, len, full };
                alts = if crash_fence == Some(fence) { vec![vec![], vec![e]] } else { vec![vec![e]] };
            }
            Some(Pending::Record { ino, page, fence }) => {
                let e = Effect::Expire { ino, page };
                alts = if crash_fence == Some(fence) { vec![vec![], vec![e]] } else { vec![vec![e]] };
            }
            None => {}
        }
        if let Some((ino, page)) = self.window {
            alts = alts
                .into_iter()
                .flat_map(|a| {
                    let mut b = a.clone();
                    b.push(Effect::Expire { ino, page });
                    [a, b]
                })
                .collect();
        }
        let alts = alts.into_iter().map(|effects| self.materialize(&effects)).collect();
        Prediction { oracle: self, alts }
    }

    fn materialize(&self, effects: &[Effect]) -> Alt {
        let mut alt = Alt::default();
        let mut scratch: BTreeMap<u64, OFile> = BTreeMap::new();
        let mut touched: BTreeSet<(u64, u64)> = BTreeSet::new();
        for e in effects {
            let f = scratch
                .entry(e.ino())
                .or_insert_with(|| self.files.get(&e.ino()).cloned().unwrap_or_default());
            match *e {
                Effect::Commit { ino, mode, offset, len, ref full } => {
                    touched.extend(f.commit(&self.zero, mode, offset, len, full).into_iter().map(|p| (ino, p)));
                }
                Effect::Expire { ino, page } => {
                    f.expire(&self.zero, page);
                    touched.insert((ino, page));
                }
            }
        }
        for (ino, p) in touched {
            alt.pages.insert((ino, p), scratch[&ino].pred[&p].clone());
        }
        for (ino, f) in scratch {
            alt.sizes.insert(ino, f.predicted_size());
        }
        alt
    }
}

/// Overrides of the base prediction for one admissible outcome.
#[derive(Debug, Clone, Default)]
pub struct Alt {
    pages: BTreeMap<(u64, u64), Arc<Page>>,
    sizes: BTreeMap<u64, u64>,
}

pub struct Prediction<'a> {
    oracle: &'a Oracle,
    alts: Vec<Alt>,
}

/// First difference between a recovered state and every admissible one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub ino: u64,
    /// `None` for a size mismatch.
    pub page: Option<u64>,
    pub offset_in_page: usize,
    pub expected: Vec<u8>,
    pub got: Vec<u8>,
    pub alternatives: usize,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.page {
            Some(p) => write!(
                f,
                "ino {} page {} offset {}: expected {} got {} ({} admissible states)",
                self.ino,
                p,
                self.offset_in_page,
                hex::encode(&self.expected),
                hex::encode(&self.got),
                self.alternatives
            ),
            None => write!(
                f,
                "ino {} size: expected {} got {} ({} admissible states)",
                self.ino,
                u64::from_le_bytes(self.expected[..8].try_into().unwrap()),
                u64::from_le_bytes(self.got[..8].try_into().unwrap()),
                self.alternatives
            ),
        }
    }
}

/// Remembers page pairs already found equal, keyed by pointer identity. The
/// pages are kept alive so pointers cannot be reused.
#[derive(Default)]
pub struct VerifyCache {
    equal: HashMap<(u64, u64), (Arc<Page>, Arc<Page>)>,
}

impl VerifyCache {
    fn same(&mut self, key: (u64, u64), got: Option<&Arc<Page>>, want: Option<&Arc<Page>>) -> bool {
        match (got, want) {
            (None, None) => true,
            (Some(g), None) | (None, Some(g)) => g.iter().all(|&b| b == 0),
            (Some(g), Some(w)) => {
                if let Some((cg, cw)) = self.equal.get(&key) {
                    if Arc::ptr_eq(cg, g) && Arc::ptr_eq(cw, w) {
                        return true;
                    }
                }
                if Arc::ptr_eq(g, w) || g[..] == w[..] {
                    self.equal.insert(key, (g.clone(), w.clone()));
                    true
                } else {
                    false
                }
            }
        }
    }
}

fn page_mismatch(ino: u64, page: u64, got: Option<&Arc<Page>>, want: Option<&Arc<Page>>, alts: usize) -> Mismatch {
    let zero = [0u8; PAGE_SIZE];
    let g: &Page = got.map_or(&zero, |p| p);
    let w: &Page = want.map_or(&zero, |p| p);
    let at = (0..PAGE_SIZE).find(|&i| g[i] != w[i]).unwrap_or(0);
    let end = (at + 8).min(PAGE_SIZE);
    Mismatch {
        ino,
        page: Some(page),
        offset_in_page: at,
        expected: w[at..end].to_vec(),
        got: g[at..end].to_vec(),
        alternatives: alts,
    }
}

fn size_mismatch(ino: u64, want: u64, got: u64, alts: usize) -> Mismatch {
    Mismatch {
        ino,
        page: None,
        offset_in_page: 0,
        expected: want.to_le_bytes().to_vec(),
        got: got.to_le_bytes().to_vec(),
        alternatives: alts,
    }
}

impl Prediction<'_> {
    pub fn alternatives(&self) -> usize {
        self.alts.len()
    }

    /// Admissible images of one page, deduplicated.
    pub fn page_images(&self, ino: u64, page: u64) -> Vec<Arc<Page>> {
        let base = self.oracle.files.get(&ino).and_then(|f| f.pred.get(&page)).cloned();
        let base = base.unwrap_or_else(|| self.oracle.zero.clone());
        let mut out: Vec<Arc<Page>> = Vec::new();
        for a in &self.alts {
            let img = a.pages.get(&(ino, page)).cloned().unwrap_or_else(|| base.clone());
            if !out.iter().any(|o| o[..] == img[..]) {
                out.push(img);
            }
        }
        out
    }

    pub fn sizes(&self, ino: u64) -> Vec<u64> {
        let base = self.oracle.files.get(&ino).map_or(0, |f| f.predicted_size());
        let mut out: Vec<u64> = self.alts.iter().map(|a| a.sizes.get(&ino).copied().unwrap_or(base)).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Checks that `recovered` equals one admissible state on every page and
    /// every file size.
    pub fn verify(&self, recovered: &DiskState, cache: &mut VerifyCache) -> Result<(), Mismatch> {
        let n = self.alts.len();
        let override_pages: BTreeSet<(u64, u64)> = self.alts.iter().flat_map(|a| a.pages.keys().copied()).collect();
        let override_sizes: BTreeSet<u64> = self.alts.iter().flat_map(|a| a.sizes.keys().copied()).collect();
        let files = &self.oracle.files;
        let mut keys: BTreeSet<(u64, u64)> = BTreeSet::new();
        for (&ino, f) in files {
            keys.extend(f.pred.keys().map(|&p| (ino, p)));
        }
        for (&ino, f) in &recovered.files {
            keys.extend(f.pages.keys().map(|&p| (ino, p)));
        }
        for &(ino, p) in keys.difference(&override_pages) {
            let want = files.get(&ino).and_then(|f| f.pred.get(&p));
            let got = recovered.page(ino, p);
            if !cache.same((ino, p), got, want) {
                return Err(page_mismatch(ino, p, got, want, n));
            }
        }
        let inos: BTreeSet<u64> = files.keys().chain(recovered.files.keys()).copied().collect();
        for &ino in inos.difference(&override_sizes) {
            let want = files.get(&ino).map_or(0, |f| f.predicted_size());
            if recovered.size(ino) != want {
                return Err(size_mismatch(ino, want, recovered.size(ino), n));
            }
        }
        let mut first_err = None;
        'alts: for a in &self.alts {
            for &(ino, p) in &override_pages {
                let base = files.get(&ino).and_then(|f| f.pred.get(&p));
                let want = a.pages.get(&(ino, p)).or(base);
                let got = recovered.page(ino, p);
                if !cache.same((ino, p), got, want) {
                    first_err.get_or_insert_with(|| page_mismatch(ino, p, got, want, n));
                    continue 'alts;
                }
            }
            for &ino in &override_sizes {
                let base = files.get(&ino).map_or(0, |f| f.predicted_size());
                let want = a.sizes.get(&ino).copied().unwrap_or(base);
                if recovered.size(ino) != want {
                    first_err.get_or_insert_with(|| size_mismatch(ino, want, recovered.size(ino), n));
                    continue 'alts;
                }
            }
            return Ok(());
        }
        Err(first_err.expect("at least one alternative"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::CommitPath;

    fn rec(fence: u64, event: TraceEvent) -> TraceRecord {
        TraceRecord { fence, event }
    }

    fn write(fence: u64, offset: u64, data: &[u8]) -> TraceRecord {
        rec(fence, TraceEvent::Write { ino: 1, offset, len: data.len() as u64, data: data.to_vec() })
    }

    fn osync(fence: u64, tid: u64, offset: u64, len: u64, size: u64) -> TraceRecord {
        rec(fence, TraceEvent::SyncCommit { ino: 1, tid, mode: SyncMode::OSync, path: CommitPath::Logged, offset, len, size, entries: 1, pages: vec![] })
    }

    fn wb(fence: u64, page: u64, size: u64) -> TraceRecord {
        rec(fence, TraceEvent::WritebackDurable { ino: 1, offset: page * PS, len: PS, size })
    }

    fn record(fence: u64, page: u64, tid: u64) -> TraceRecord {
        rec(fence, TraceEvent::WbRecordCommit { ino: 1, offset: page * PS, tid })
    }

    fn prefix(images: &[Arc<Page>], n: usize) -> Vec<Vec<u8>> {
        let mut v: Vec<Vec<u8>> = images.iter().map(|p| p[..n].to_vec()).collect();
        v.sort();
        v
    }

    #[test]
    fn no_events_predicts_empty_disk() {
        let o = Oracle::new();
        let p = o.predict(None);
        assert_eq!(p.alternatives(), 1);
        assert_eq!(prefix(&p.page_images(1, 0), 4), vec![vec![0; 4]]);
        assert!(p.verify(&DiskState::default(), &mut VerifyCache::default()).is_ok());
    }

    #[test]
    fn committed_sync_is_predicted() {
        let mut o = Oracle::new();
        o.apply(&write(0, 0, b"hello")).unwrap();
        o.apply(&osync(1, 1, 0, 5, 5)).unwrap();
        let p = o.predict(None);
        assert_eq!(prefix(&p.page_images(1, 0), 5), vec![b"hello".to_vec()]);
        assert_eq!(p.sizes(1), vec![5]);
    }

    #[test]
    fn commit_at_crash_fence_is_uncertain() {
        let mut o = Oracle::new();
        o.apply(&write(0, 0, b"hello")).unwrap();
        o.apply(&osync(1, 1, 0, 5, 5)).unwrap();
        let p = o.predict(Some(1));
        assert_eq!(prefix(&p.page_images(1, 0), 5), vec![vec![0; 5], b"hello".to_vec()]);
        assert_eq!(p.sizes(1), vec![0, 5]);
    }

    #[test]
    fn record_expires_prior_events() {
        // O_SYNC, async overwrite, write-back with record, O_SYNC
        let mut o = Oracle::new();
        o.apply(&write(0, 0, b"abcdef")).unwrap();
        o.apply(&wb(0, 0, 6)).unwrap();
        o.apply(&rec(0, TraceEvent::WritebackDurable { ino: 1, offset: 0, len: 0, size: 6 })).unwrap();
        o.apply(&write(0, 1, b"bcxyz")).unwrap();
        o.apply(&osync(2, 1, 1, 5, 6)).unwrap();
        o.apply(&write(2, 1, b"31xy0")).unwrap();
        o.apply(&wb(2, 0, 6)).unwrap();
        o.apply(&record(4, 0, 1)).unwrap();
        o.apply(&write(4, 5, b"z")).unwrap();
        o.apply(&osync(6, 2, 5, 1, 6)).unwrap();
        let p = o.predict(None);
        assert_eq!(prefix(&p.page_images(1, 0), 6), vec![b"a31xyz".to_vec()]);
    }

    #[test]
    fn checkpoint_without_record_is_a_window() {
        let mut o = Oracle::new();
        o.apply(&write(0, 0, b"abcdef")).unwrap();
        o.apply(&osync(2, 1, 0, 6, 6)).unwrap();
        o.apply(&write(2, 0, b"X")).unwrap();
        o.apply(&wb(2, 0, 6)).unwrap();
        let p = o.predict(Some(2));
        assert_eq!(prefix(&p.page_images(1, 0), 6), vec![b"Xbcdef".to_vec(), b"abcdef".to_vec()]);
        // the window closes at the next event even without a record
        o.apply(&write(2, 10, b"q")).unwrap();
        assert_eq!(prefix(&o.predict(None).page_images(1, 0), 6), vec![b"Xbcdef".to_vec()]);
    }

    #[test]
    fn fsync_covers_whole_file_jointly() {
        let mut o = Oracle::new();
        o.apply(&write(0, 0, &[1u8; 8192])).unwrap();
        o.apply(&rec(1, TraceEvent::SyncCommit { ino: 1, tid: 1, mode: SyncMode::Fsync, path: CommitPath::Logged, offset: 0, len: 0, size: 8192, entries: 3, pages: vec![0, 1] }))
            .unwrap();
        let p = o.predict(Some(1));
        assert_eq!(p.alternatives(), 2);
        // a state with only one of the two pages is not admissible
        let mut half = DiskState::default();
        half.put_page(1, 0, Arc::new([1u8; PAGE_SIZE]));
        half.set_size(1, 8192);
        assert!(p.verify(&half, &mut VerifyCache::default()).is_err());
        half.put_page(1, 1, Arc::new([1u8; PAGE_SIZE]));
        assert!(p.verify(&half, &mut VerifyCache::default()).is_ok());
        assert!(p.verify(&DiskState::default(), &mut VerifyCache::default()).is_ok());
    }

    #[test]
    fn out_of_order_rejected() {
        let mut o = Oracle::new();
        o.apply(&write(5, 0, b"a")).unwrap();
        assert_eq!(o.apply(&write(4, 0, b"b")), Err(OracleError::OutOfOrder { last: 5, got: 4 }));
    }

    #[test]
    fn size_mismatch_is_reported() {
        let mut o = Oracle::new();
        o.apply(&write(0, 0, b"abc")).unwrap();
        o.apply(&osync(1, 1, 0, 3, 3)).unwrap();
        let mut d = DiskState::default();
        let mut page = [0u8; PAGE_SIZE];
        page[..3].copy_from_slice(b"abc");
        d.put_page(1, 0, Arc::new(page));
        let err = o.predict(None).verify(&d, &mut VerifyCache::default()).unwrap_err();
        assert_eq!(err.page, None);
        d.set_size(1, 3);
        assert!(o.predict(None).verify(&d, &mut VerifyCache::default()).is_ok());
    }

    #[test]
    fn deterministic() {
        let trace = vec![write(0, 0, b"abc"), osync(1, 1, 0, 3, 3), write(1, 4090, b"0123456789"), wb(1, 0, 4100)];
        let a = {
            let mut o = Oracle::new();
            o.apply_all(&trace).unwrap();
            o.predict(Some(1)).page_images(1, 0)
        };
        let mut o = Oracle::new();
        o.apply_all(&trace).unwrap();
        let b = o.predict(Some(1)).page_images(1, 0);
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(&b).all(|(x, y)| x[..] == y[..]));
    }
}
