//! Wall-clock cost of the engine's own work, with simulated device latency
//! switched off. The simulated-latency comparison is `nvlog bench`.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};
use nvlog::pmem::CrashPolicy;
use nvlog::{recover, Config, Engine, LatencyMode, RecoverOptions};

const PS: u64 = 4096;
const SPAN: u64 = 8 << 20;

fn cfg(nvlog_enabled: bool) -> Config {
    Config { latency_mode: LatencyMode::Off, nvm_store_latency_ns: 0, nvlog_enabled, nvm_size_pages: 16384, ..Config::default() }
}

fn sync_writes(c: &mut Criterion) {
    let mut g = c.benchmark_group("pwrite_sync");
    for size in [100u64, 1000, 4096, 16384] {
        g.throughput(Throughput::Bytes(size));
        for (name, on) in [("log", true), ("disk", false)] {
            let e = Engine::new(cfg(on)).unwrap();
            let data = vec![0x5a; size as usize];
            let mut off = 0;
            let mut n = 0u64;
            g.bench_with_input(BenchmarkId::new(name, size), &size, |b, _| {
                b.iter(|| {
                    e.pwrite_sync(1, off, black_box(&data)).unwrap();
                    off = (off + size) % SPAN;
                    n += 1;
                    if n % 256 == 0 {
                        e.writeback_tick().unwrap();
                        e.gc_pass().unwrap();
                    }
                })
            });
        }
    }
    g.finish();
}

fn cached_io(c: &mut Criterion) {
    let e = Engine::new(cfg(true)).unwrap();
    let page = [1u8; PS as usize];
    for p in 0..256 {
        e.write(1, p * PS, &page).unwrap();
    }
    let mut g = c.benchmark_group("cached");
    g.throughput(Throughput::Bytes(PS));
    let mut p = 0;
    g.bench_function("read_4k", |b| {
        b.iter(|| {
            p = (p + 1) % 256;
            black_box(e.read(1, p * PS, PS as usize).unwrap())
        })
    });
    g.bench_function("write_4k", |b| {
        b.iter(|| {
            p = (p + 1) % 256;
            e.write(1, p * PS, black_box(&page)).unwrap()
        })
    });
    g.finish();
}

/// An engine with `txns` small synced writes spread over 64 pages.
fn populated(txns: u64) -> Engine {
    let e = Engine::new(cfg(true)).unwrap();
    for i in 0..txns {
        e.pwrite_sync(1, (i * 97) % (64 * PS), b"0123456789abcdef").unwrap();
    }
    e
}

fn maintenance(c: &mut Criterion) {
    let mut g = c.benchmark_group("maintenance");
    g.sample_size(20);
    for txns in [1000u64, 5000] {
        let e = populated(txns);
        let image = e.device().crash(CrashPolicy::DropAllUnfenced).next().unwrap();
        let disk = e.disk().snapshot();
        g.bench_with_input(BenchmarkId::new("recover", txns), &txns, |b, _| {
            b.iter_batched(
                || (image.clone(), disk.clone()),
                |(mut img, mut d)| recover(&mut img, &mut d, RecoverOptions::default()).unwrap(),
                BatchSize::LargeInput,
            )
        });
        g.bench_with_input(BenchmarkId::new("drain_and_gc", txns), &txns, |b, &t| {
            b.iter_batched(
                || populated(t),
                |e| {
                    e.drain().unwrap();
                    e.gc_pass().unwrap()
                },
                BatchSize::PerIteration,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, sync_writes, cached_io, maintenance);
criterion_main!(benches);
