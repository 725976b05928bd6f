//! Externally observable event trace emitted by the engine.
//!
//! One record per line (NDJSON). Every record carries the device fence count
//! at the moment it was emitted. See `docs/trace.md`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    OSync,
    Fsync,
    Fdatasync,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitPath {
    /// Committed to the NVM log.
    Logged,
    /// NVM was full; data went synchronously to disk.
    Fallback,
    /// Logging is disabled; data went synchronously to disk.
    Direct,
    /// Nothing needed persisting.
    Noop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Write {
        ino: u64,
        offset: u64,
        len: u64,
        #[serde(with = "hex::serde")]
        data: Vec<u8>,
    },
    /// A sync became durable. For `o_sync`, `offset`/`len` give the range;
    /// for fsync/fdatasync they are zero. `size` is the file size the sync
    /// made durable. `entries` counts the data and metadata entries of the
    /// logged transaction (0 when nothing was logged). `pages` lists the
    /// pages an fsync/fdatasync logged as full images.
    SyncCommit {
        ino: u64,
        tid: u64,
        mode: SyncMode,
        path: CommitPath,
        offset: u64,
        len: u64,
        size: u64,
        entries: u32,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        pages: Vec<u64>,
    },
    /// A disk page write completed. `len == 0` marks a size-only (metadata)
    /// checkpoint of `size`.
    WritebackDurable { ino: u64, offset: u64, len: u64, size: u64 },
    WbRecordCommit { ino: u64, offset: u64, tid: u64 },
    CrashPoint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub fence: u64,
    #[serde(flatten)]
    pub event: TraceEvent,
}

/// Collects trace records in memory and optionally streams them to a file.
#[derive(Default)]
pub struct TraceSink {
    records: Mutex<Vec<TraceRecord>>,
    out: Option<Mutex<BufWriter<File>>>,
}

impl TraceSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> std::io::Result<Self> {
        Ok(TraceSink { records: Mutex::default(), out: Some(Mutex::new(BufWriter::new(File::create(path)?))) })
    }

    pub fn emit(&self, fence: u64, event: TraceEvent) {
        let rec = TraceRecord { fence, event };
        if let Some(out) = &self.out {
            let mut w = out.lock();
            // a trace that fails to write is a harness bug, not a data error
            serde_json::to_writer(&mut *w, &rec).expect("serialize trace record");
            w.write_all(b"\n").expect("write trace record");
        }
        self.records.lock().push(rec);
    }

    pub fn len(&self) -> usize {
        self.records.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records from index `from` onward.
    pub fn since(&self, from: usize) -> Vec<TraceRecord> {
        self.records.lock()[from..].to_vec()
    }

    pub fn records(&self) -> Vec<TraceRecord> {
        self.since(0)
    }

    pub fn flush(&self) -> std::io::Result<()> {
        if let Some(out) = &self.out {
            out.lock().flush()?;
        }
        Ok(())
    }
}

impl std::fmt::Debug for TraceSink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TraceSink").field("len", &self.len()).finish()
    }
}

pub fn read_trace(path: &Path) -> std::io::Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndjson_shape() {
        let rec = TraceRecord { fence: 3, event: TraceEvent::Write { ino: 1, offset: 2, len: 2, data: vec![0xab, 0x01] } };
        let s = serde_json::to_string(&rec).unwrap();
        assert_eq!(s, r#"{"fence":3,"event":"write","ino":1,"offset":2,"len":2,"data":"ab01"}"#);
        assert_eq!(serde_json::from_str::<TraceRecord>(&s).unwrap(), rec);
        let c = TraceRecord {
            fence: 9,
            event: TraceEvent::SyncCommit { ino: 1, tid: 4, mode: SyncMode::OSync, path: CommitPath::Logged, offset: 0, len: 5, size: 6, entries: 2, pages: vec![] },
        };
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains(r#""mode":"o_sync""#), "{s}");
        assert_eq!(serde_json::from_str::<TraceRecord>(&s).unwrap(), c);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ndjson");
        let sink = TraceSink::to_file(&path).unwrap();
        sink.emit(0, TraceEvent::CrashPoint);
        sink.emit(1, TraceEvent::WbRecordCommit { ino: 2, offset: 4096, tid: 7 });
        sink.flush().unwrap();
        assert_eq!(read_trace(&path).unwrap(), sink.records());
    }
}
