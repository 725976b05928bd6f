use thiserror::Error;

use crate::pmem::PmemError;
use crate::pool::NvmFull;

#[derive(Debug, Error)]
pub enum Error {
    #[error("NVM is full")]
    NvmFull,
    /// Even the write-back record reserve is exhausted; a disk fallback
    /// could not retire the page's log entries.
    #[error("NVM exhausted while retiring log entries for ino {ino} page {page}")]
    NvmExhausted { ino: u64, page: u64 },
    #[error("device not formatted (missing super log header at page 0)")]
    NotFormatted,
    #[error("inode log for dev {s_dev} ino {ino} already exists")]
    DuplicateInode { s_dev: u64, ino: u64 },
    #[error("corrupt log (ino {ino:?}, page {page}): {reason}")]
    CorruptLog { ino: Option<u64>, page: u32, reason: String },
    #[error("no such file: ino {0}")]
    NoSuchFile(u64),
    #[error("disk error: {0}")]
    Disk(#[source] std::io::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("trace error: {0}")]
    Trace(String),
    #[error(transparent)]
    Pmem(#[from] PmemError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<NvmFull> for Error {
    fn from(_: NvmFull) -> Self {
        Error::NvmFull
    }
}

impl Error {
    /// Stable short name, used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NvmFull => "nvm_full",
            Error::NvmExhausted { .. } => "nvm_exhausted",
            Error::NotFormatted => "not_formatted",
            Error::DuplicateInode { .. } => "duplicate_inode",
            Error::CorruptLog { .. } => "corrupt_log",
            Error::NoSuchFile(_) => "no_such_file",
            Error::Disk(_) => "disk",
            Error::Config(_) => "config",
            Error::Trace(_) => "trace",
            Error::Io(_) => "io",
            Error::Pmem(PmemError::Exists(_)) => "exists",
            Error::Pmem(PmemError::Io(_)) => "io",
            Error::Pmem(_) => "pmem",
        }
    }

    pub(crate) fn corrupt(ino: Option<u64>, page: u32, reason: impl Into<String>) -> Self {
        Error::CorruptLog { ino, page, reason: reason.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
