//! Engine configuration: `key = value` lines, `#` comments.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pmem::PmemMode;
use crate::simclock::LatencyMode;

/// Scope of the active-sync predictor counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActsyncScope {
    #[default]
    File,
    Global,
}

impl FromStr for ActsyncScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "file" => Ok(Self::File),
            "global" => Ok(Self::Global),
            other => Err(format!("unknown actsync scope `{other}` (expected file|global)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub nvm_size_pages: u32,
    pub pmem_mode: PmemMode,
    pub nvm_store_latency_ns: u64,
    pub sensitivity: u32,
    pub actsync_scope: ActsyncScope,
    pub writeback_interval_ms: u64,
    pub writeback_batch: usize,
    pub gc_interval_ms: u64,
    pub disk_latency_us: u64,
    pub disk_sync_latency_us: u64,
    pub page_pool_batch: usize,
    pub record_reserve_pages: usize,
    pub nvlog_enabled: bool,
    /// 0 = unbounded.
    pub cache_cap_pages: usize,
    pub s_dev: u64,
    pub latency_mode: LatencyMode,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            nvm_size_pages: 16384,
            pmem_mode: PmemMode::Adr,
            nvm_store_latency_ns: 300,
            sensitivity: 2,
            actsync_scope: ActsyncScope::File,
            writeback_interval_ms: 500,
            writeback_batch: 64,
            gc_interval_ms: 10_000,
            disk_latency_us: 80,
            disk_sync_latency_us: 80,
            page_pool_batch: 16,
            record_reserve_pages: 8,
            nvlog_enabled: true,
            cache_cap_pages: 0,
            s_dev: 1,
            latency_mode: LatencyMode::Account,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::Config(format!("{key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got `{value}`"))),
    }
}

impl Config {
    pub const KEYS: &'static [&'static str] = &[
        "nvm_size_pages",
        "pmem_mode",
        "nvm_store_latency_ns",
        "sensitivity",
        "actsync_scope",
        "writeback_interval_ms",
        "writeback_batch",
        "gc_interval_ms",
        "disk_latency_us",
        "disk_sync_latency_us",
        "page_pool_batch",
        "record_reserve_pages",
        "nvlog_enabled",
        "cache_cap_pages",
        "s_dev",
        "latency_mode",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "nvm_size_pages" => self.nvm_size_pages = parse(key, v)?,
            "pmem_mode" => self.pmem_mode = parse(key, v)?,
            "nvm_store_latency_ns" => self.nvm_store_latency_ns = parse(key, v)?,
            "sensitivity" => self.sensitivity = parse(key, v)?,
            "actsync_scope" => self.actsync_scope = parse(key, v)?,
            "writeback_interval_ms" => self.writeback_interval_ms = parse(key, v)?,
            "writeback_batch" => self.writeback_batch = parse(key, v)?,
            "gc_interval_ms" => self.gc_interval_ms = parse(key, v)?,
            "disk_latency_us" => self.disk_latency_us = parse(key, v)?,
            "disk_sync_latency_us" => self.disk_sync_latency_us = parse(key, v)?,
            "page_pool_batch" => self.page_pool_batch = parse(key, v)?,
            "record_reserve_pages" => self.record_reserve_pages = parse(key, v)?,
            "nvlog_enabled" => self.nvlog_enabled = parse_bool(key, v)?,
            "cache_cap_pages" => self.cache_cap_pages = parse(key, v)?,
            "s_dev" => self.s_dev = parse(key, v)?,
            "latency_mode" => self.latency_mode = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nvm_size_pages < 2 {
            return Err(Error::Config("nvm_size_pages must be at least 2".into()));
        }
        if self.sensitivity == 0 {
            return Err(Error::Config("sensitivity must be at least 1".into()));
        }
        if self.writeback_batch == 0 || self.page_pool_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse_str(&text)
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.pmem_mode {
            PmemMode::Adr => "adr",
            PmemMode::Eadr => "eadr",
        };
        let scope = match self.actsync_scope {
            ActsyncScope::File => "file",
            ActsyncScope::Global => "global",
        };
        let lat = match self.latency_mode {
            LatencyMode::Account => "account",
            LatencyMode::Sleep => "sleep",
            LatencyMode::Off => "off",
        };
        writeln!(f, "nvm_size_pages = {}", self.nvm_size_pages)?;
        writeln!(f, "pmem_mode = {mode}")?;
        writeln!(f, "nvm_store_latency_ns = {}", self.nvm_store_latency_ns)?;
        writeln!(f, "sensitivity = {}", self.sensitivity)?;
        writeln!(f, "actsync_scope = {scope}")?;
        writeln!(f, "writeback_interval_ms = {}", self.writeback_interval_ms)?;
        writeln!(f, "writeback_batch = {}", self.writeback_batch)?;
        writeln!(f, "gc_interval_ms = {}", self.gc_interval_ms)?;
        writeln!(f, "disk_latency_us = {}", self.disk_latency_us)?;
        writeln!(f, "disk_sync_latency_us = {}", self.disk_sync_latency_us)?;
        writeln!(f, "page_pool_batch = {}", self.page_pool_batch)?;
        writeln!(f, "record_reserve_pages = {}", self.record_reserve_pages)?;
        writeln!(f, "nvlog_enabled = {}", self.nvlog_enabled)?;
        writeln!(f, "cache_cap_pages = {}", self.cache_cap_pages)?;
        writeln!(f, "s_dev = {}", self.s_dev)?;
        writeln!(f, "latency_mode = {lat}")
    }
}
