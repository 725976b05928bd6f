use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use nvlog::crashtest::{expiry_scenario, GenOptions};
use nvlog::engine::disk_latency;
use nvlog::workload::write_csv;
use nvlog::{
    campaign, dump_log, Access, Config, CrashOptions, Disk, Engine, Maintenance, Mutation, PmemDevice, RecoverOptions,
    RwRatio, SyncStyle, TraceSink, WorkloadSpec,
};

#[derive(Parser)]
#[command(name = "nvlog", version, about = "NVM write-ahead log beside a page cache: benchmarks, crash tests, tools")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a zeroed, formatted NVM image and a disk directory.
    Init {
        #[command(flatten)]
        store: Store,
        /// Image size in pages (defaults to `nvm_size_pages`).
        #[arg(long)]
        pages: Option<u32>,
        #[arg(long)]
        force: bool,
    },
    /// Run a synthetic workload and emit metrics as CSV.
    Bench(BenchArgs),
    /// Randomized crash-injection campaign, checked against the oracle.
    Crashtest(CrashArgs),
    /// Recover an image onto its disk directory.
    Recover {
        #[command(flatten)]
        store: Store,
        #[arg(long)]
        json: bool,
        /// Test hook: replay every entry, ignoring write-back records.
        #[arg(long)]
        no_expiry: bool,
    },
    /// Recover, run one GC pass and print space statistics.
    GcStats {
        #[command(flatten)]
        store: Store,
        #[arg(long)]
        json: bool,
    },
    /// Pretty-print the log chains of an image.
    DumpLog {
        #[arg(long)]
        nvm: PathBuf,
    },
}

#[derive(Args)]
struct Store {
    /// NVM image file.
    #[arg(long)]
    nvm: PathBuf,
    /// Disk directory.
    #[arg(long)]
    disk: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Start from a preset (`varmail`); other flags override it.
    #[arg(long)]
    preset: Option<String>,
    /// Reads per write, as `r/w`.
    #[arg(long)]
    rw: Option<RwRatio>,
    #[arg(long)]
    sync_pct: Option<u32>,
    #[arg(long, value_parser = parse_size)]
    io_size: Option<u64>,
    /// `seq`, `random` or `random:SEED`.
    #[arg(long)]
    access: Option<Access>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_parser = parse_size)]
    total_bytes: Option<u64>,
    #[arg(long, value_parser = parse_size)]
    file_size: Option<u64>,
    /// `o_sync`, `fsync` or `fdatasync`.
    #[arg(long)]
    sync_style: Option<SyncStyle>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_prewarm: bool,
    /// Virtual milliseconds between metric rows.
    #[arg(long)]
    interval_ms: Option<u64>,
    /// Write-back tick every N operations per worker.
    #[arg(long)]
    tick_every: Option<u64>,
    /// GC pass every N operations per worker.
    #[arg(long)]
    gc_every: Option<u64>,
    /// Use background write-back and GC threads instead of inline ticks.
    #[arg(long)]
    background: bool,
    /// CSV output (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the event trace as NDJSON.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Run on an initialized image instead of in memory.
    #[arg(long, requires = "disk")]
    nvm: Option<PathBuf>,
    #[arg(long, requires = "nvm")]
    disk: Option<PathBuf>,
}

#[derive(Args)]
struct CrashArgs {
    /// Run a canned scenario instead of random workloads (`expiry`).
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, default_value_t = 100)]
    workloads: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `none`, `drop-commit-fence`, `skip-wb-record` or `no-expiry`.
    #[arg(long, default_value = "none")]
    mutation: Mutation,
    /// Cap NVM well below every workload's footprint.
    #[arg(long)]
    tiny_nvm: bool,
    #[arg(long)]
    json: bool,
}

struct Failure {
    kind: &'static str,
    msg: String,
}

impl From<nvlog::Error> for Failure {
    fn from(e: nvlog::Error) -> Self {
        Failure { kind: e.kind(), msg: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure { kind: "io", msg: e.to_string() }
    }
}

impl From<nvlog::pmem::PmemError> for Failure {
    fn from(e: nvlog::pmem::PmemError) -> Self {
        nvlog::Error::from(e).into()
    }
}

fn fail(kind: &'static str, msg: impl Into<String>) -> Failure {
    Failure { kind, msg: msg.into() }
}

type CmdResult = Result<(), Failure>;

fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (num, mult) = match s.char_indices().last() {
        Some((i, c)) if c.is_ascii_alphabetic() => {
            let m = match c.to_ascii_lowercase() {
                'k' => 1 << 10,
                'm' => 1 << 20,
                'g' => 1 << 30,
                _ => return Err(format!("unknown size suffix in `{s}`")),
            };
            (&s[..i], m)
        }
        _ => (s, 1),
    };
    num.parse::<u64>().map(|n| n * mult).map_err(|_| format!("bad size `{s}`"))
}

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| fail("config", format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn open_engine(cfg: &Config, store: &Store, opts: RecoverOptions) -> Result<(Engine, nvlog::RecoveryReport), Failure> {
    if !store.nvm.exists() {
        return Err(fail("not_found", format!("no image at {}", store.nvm.display())));
    }
    let dev = PmemDevice::open_file(&store.nvm, cfg.pmem_mode)?.with_latency(cfg.nvm_store_latency_ns, cfg.latency_mode);
    let disk = Disk::open_dir(&store.disk, disk_latency(cfg))?;
    Ok(Engine::open(cfg.clone(), Arc::new(dev), Arc::new(disk), opts)?)
}

fn cmd_init(cfg: &Config, store: &Store, pages: Option<u32>, force: bool) -> CmdResult {
    let pages = pages.unwrap_or(cfg.nvm_size_pages);
    if pages < 2 {
        return Err(fail("config", "an image needs at least 2 pages"));
    }
    PmemDevice::create_file(&store.nvm, pages, force)?;
    let dev = Arc::new(PmemDevice::open_file(&store.nvm, cfg.pmem_mode)?);
    let disk = Arc::new(Disk::open_dir(&store.disk, disk_latency(cfg))?);
    let engine = Engine::create(cfg.clone(), dev, disk)?;
    engine.shutdown()?;
    println!("initialized {} ({pages} pages) and {}", store.nvm.display(), store.disk.display());
    Ok(())
}

fn bench_spec(a: &BenchArgs) -> Result<WorkloadSpec, Failure> {
    let mut spec = match a.preset.as_deref() {
        None => WorkloadSpec::default(),
        Some("varmail") => WorkloadSpec::varmail(),
        Some(other) => return Err(fail("usage", format!("unknown preset `{other}` (expected varmail)"))),
    };
    if let Some(v) = a.rw {
        spec.rw_ratio = v;
    }
    if let Some(v) = a.sync_pct {
        spec.sync_pct = v;
    }
    if let Some(v) = a.io_size {
        spec.io_size = v;
    }
    if let Some(v) = a.access {
        spec.access = v;
    }
    if let Some(v) = a.threads {
        spec.threads = v;
    }
    if let Some(v) = a.total_bytes {
        spec.total_bytes = v;
    }
    if let Some(v) = a.file_size {
        spec.file_size = v;
    }
    if let Some(v) = a.sync_style {
        spec.sync_style = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.interval_ms {
        spec.metrics_interval_ms = v;
    }
    spec.prewarm &= !a.no_prewarm;
    spec.maintenance = if a.background {
        Maintenance::Threads
    } else {
        let Maintenance::Inline { tick_every, gc_every } = WorkloadSpec::default().maintenance else { unreachable!() };
        Maintenance::Inline { tick_every: a.tick_every.unwrap_or(tick_every), gc_every: a.gc_every.unwrap_or(gc_every) }
    };
    spec.validate()?;
    Ok(spec)
}

fn cmd_bench(cfg: &Config, a: &BenchArgs) -> CmdResult {
    let spec = bench_spec(a)?;
    let engine = match (&a.nvm, &a.disk) {
        (Some(nvm), Some(disk)) => {
            let (e, _) = open_engine(cfg, &Store { nvm: nvm.clone(), disk: disk.clone() }, RecoverOptions::default())?;
            e
        }
        _ => Engine::new(cfg.clone())?,
    };
    let engine = Arc::new(engine);
    let sink = match &a.trace {
        Some(p) => Some(Arc::new(TraceSink::to_file(p)?)),
        None => None,
    };
    engine.set_trace(sink.clone());
    let res = nvlog::run_bench(&engine, &spec)?;
    if let Some(t) = &sink {
        t.flush()?;
    }
    match &a.out {
        Some(p) => write_csv(&res.rows, BufWriter::new(File::create(p)?))?,
        None => write_csv(&res.rows, io::stdout().lock())?,
    }
    if a.nvm.is_some() {
        engine.shutdown()?;
    }
    eprintln!(
        "ops={} bytes={} elapsed_s={:.6} ops_per_sec={:.1} bytes_per_sec={:.1} peak_nvm_pages={} logged_txns={} fallback_syncs={}",
        res.ops,
        res.bytes,
        res.elapsed_ns as f64 / 1e9,
        res.ops_per_sec,
        res.bytes_per_sec,
        res.peak_nvm_pages,
        res.stats.ops.logged_txns,
        res.stats.ops.fallback_syncs
    );
    Ok(())
}

fn cmd_crashtest(a: &CrashArgs) -> CmdResult {
    if let Some(name) = &a.scenario {
        if name != "expiry" {
            return Err(fail("usage", format!("unknown scenario `{name}` (expected expiry)")));
        }
        let no_expiry = a.mutation == Mutation::NoExpiry;
        let s = expiry_scenario(no_expiry)?;
        if a.json {
            println!("{}", serde_json::to_string(&s).map_err(|e| fail("io", e.to_string()))?);
        } else {
            println!("disk before recovery: {}", s.disk_before_recovery);
            println!("recovered: {}", s.recovered);
            println!("predicted: {}", s.predicted);
        }
        if s.recovered != s.predicted {
            return Err(fail("crash_violation", format!("recovered {} but the oracle predicts {}", s.recovered, s.predicted)));
        }
        return Ok(());
    }
    let g = GenOptions { tiny_nvm: a.tiny_nvm, ..GenOptions::default() };
    let report = campaign(a.workloads, a.seed, &g, a.mutation, &CrashOptions::default())?;
    if a.json {
        println!("{}", serde_json::to_string(&report).map_err(|e| fail("io", e.to_string()))?);
    } else {
        println!("{report}");
    }
    if !report.passed() {
        return Err(fail("crash_violation", format!("{} violation(s)", report.violations())));
    }
    Ok(())
}

fn cmd_recover(cfg: &Config, store: &Store, json: bool, no_expiry: bool) -> CmdResult {
    let (engine, rep) = open_engine(cfg, store, RecoverOptions { no_expiry })?;
    engine.shutdown()?;
    if json {
        println!("{}", serde_json::to_string_pretty(&rep).map_err(|e| fail("io", e.to_string()))?);
    } else {
        println!(
            "inodes={} entries_scanned={} replayed_pages={} replayed_entries={} replayed_bytes={} dropped_uncommitted={} sizes_updated={} live_pages={} free_pages={} max_tid={} elapsed_us={}",
            rep.inodes,
            rep.entries_scanned,
            rep.replayed_pages,
            rep.replayed_entries,
            rep.replayed_bytes,
            rep.dropped_uncommitted,
            rep.sizes_updated,
            rep.live_pages,
            rep.free_pages,
            rep.max_tid,
            rep.elapsed_us
        );
    }
    Ok(())
}

fn cmd_gc_stats(cfg: &Config, store: &Store, json: bool) -> CmdResult {
    let (engine, _) = open_engine(cfg, store, RecoverOptions::default())?;
    let pass = engine.gc_pass()?;
    let s = engine.stats();
    engine.shutdown()?;
    if json {
        let v = serde_json::json!({ "pass": pass, "stats": s, "reclaimed_total": s.reclaimed_total() });
        println!("{v}");
    } else {
        println!(
            "nvm_pages_in_use={} nvm_free_pages={} nvm_capacity_pages={} reclaimed_total={} fallback_seconds={:.3} entries_scanned={} obsolete_entries={} records_kept={}",
            s.nvm_pages_in_use,
            s.nvm_free_pages,
            s.nvm_capacity_pages,
            s.reclaimed_total(),
            s.fallback_seconds,
            pass.entries_scanned,
            pass.obsolete_entries,
            pass.records_kept
        );
    }
    Ok(())
}

fn cmd_dump_log(nvm: &Path) -> CmdResult {
    let image = nvlog::pmem::PmemImage::load(nvm)?;
    let text = dump_log(&image)?;
    io::stdout().lock().write_all(text.as_bytes())?;
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    let cfg = load_config(cli)?;
    match &cli.cmd {
        Cmd::Init { store, pages, force } => cmd_init(&cfg, store, *pages, *force),
        Cmd::Bench(a) => cmd_bench(&cfg, a),
        Cmd::Crashtest(a) => cmd_crashtest(a),
        Cmd::Recover { store, json, no_expiry } => cmd_recover(&cfg, store, *json, *no_expiry),
        Cmd::GcStats { store, json } => cmd_gc_stats(&cfg, store, *json),
        Cmd::DumpLog { nvm } => cmd_dump_log(nvm),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("NVLOG_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=usage msg={first:?}");
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: kind={} msg={:?}", f.kind, f.msg);
            ExitCode::FAILURE
        }
    }
}
