use std::path::Path;
use std::process::{Command, Output};

fn nvlog(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nvlog")).args(args).output().expect("spawn nvlog")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn init(dir: &Path) -> (String, String) {
    let nvm = dir.join("nvm.img").display().to_string();
    let disk = dir.join("disk").display().to_string();
    let o = nvlog(&["init", "--nvm", &nvm, "--disk", &disk, "--pages", "512"]);
    assert!(o.status.success(), "{}", stderr(&o));
    (nvm, disk)
}

/// Parses `error: kind=K msg="..."` from the last stderr line.
fn error_kind(o: &Output) -> String {
    let err = stderr(o);
    let line = err.lines().last().unwrap_or_default().to_string();
    let rest = line.strip_prefix("error: kind=").unwrap_or_else(|| panic!("not a machine error line: {line:?}"));
    let (kind, msg) = rest.split_once(' ').unwrap();
    assert!(msg.starts_with("msg=\"") && msg.ends_with('"'), "{line}");
    kind.to_string()
}

#[test]
fn init_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let (nvm, disk) = init(dir.path());
    let again = nvlog(&["init", "--nvm", &nvm, "--disk", &disk]);
    assert_eq!(again.status.code(), Some(1));
    assert!(!error_kind(&again).is_empty());
    let forced = nvlog(&["init", "--nvm", &nvm, "--disk", &disk, "--pages", "64", "--force"]);
    assert!(forced.status.success(), "{}", stderr(&forced));
    assert_eq!(std::fs::metadata(&nvm).unwrap().len(), 64 * 4096);
}

#[test]
fn fresh_image_dumps_an_empty_super_log() {
    let dir = tempfile::tempdir().unwrap();
    let (nvm, _) = init(dir.path());
    let o = nvlog(&["dump-log", "--nvm", &nvm]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("device: 512 pages"), "{out}");
    assert!(out.contains("0 inode(s)"), "{out}");
}

#[test]
fn bench_on_an_image_then_recover_and_gc() {
    let dir = tempfile::tempdir().unwrap();
    let (nvm, disk) = init(dir.path());
    let csv = dir.path().join("m.csv");
    let o = nvlog(&[
        "bench", "--nvm", &nvm, "--disk", &disk, "--total-bytes", "256k", "--file-size", "64k", "--io-size", "1000",
        "--no-prewarm", "--out", csv.to_str().unwrap(), "--set", "latency_mode=off",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("ops="), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "timestamp,ops_per_sec,bytes_per_sec,nvm_pages_in_use,dirty_pages,fallback_active");

    let dump = stdout(&nvlog(&["dump-log", "--nvm", &nvm]));
    assert!(dump.contains("inode dev 1 ino 1"), "{dump}");
    assert!(dump.contains("WRITE IP"), "{dump}");

    let rec = nvlog(&["recover", "--nvm", &nvm, "--disk", &disk, "--json"]);
    assert!(rec.status.success(), "{}", stderr(&rec));
    let v: serde_json::Value = serde_json::from_str(&stdout(&rec)).unwrap();
    assert_eq!(v["inodes"], 1);

    let gc = nvlog(&["gc-stats", "--nvm", &nvm, "--disk", &disk, "--json"]);
    assert!(gc.status.success(), "{}", stderr(&gc));
    let v: serde_json::Value = serde_json::from_str(&stdout(&gc)).unwrap();
    assert!(v["stats"]["nvm_pages_in_use"].as_u64().unwrap() < 512);
}

#[test]
fn bench_writes_csv_to_stdout() {
    let o = nvlog(&["bench", "--preset", "varmail", "--total-bytes", "128k", "--file-size", "64k", "--no-prewarm", "--interval-ms", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let mut lines = out.lines();
    assert!(lines.next().unwrap().starts_with("timestamp,ops_per_sec"));
    for row in lines {
        assert_eq!(row.split(',').count(), 6, "{row}");
    }
}

#[test]
fn bench_trace_is_ndjson() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.ndjson");
    let o = nvlog(&[
        "bench", "--total-bytes", "12k", "--file-size", "12k", "--io-size", "3000", "--no-prewarm", "--tick-every", "2",
        "--trace", trace.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&trace).unwrap();
    let mut last = 0;
    let mut kinds = std::collections::BTreeSet::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let fence = v["fence"].as_u64().unwrap();
        assert!(fence >= last);
        last = fence;
        kinds.insert(v["event"].as_str().unwrap().to_string());
    }
    for k in ["write", "sync_commit", "writeback_durable", "wb_record_commit"] {
        assert!(kinds.contains(k), "{k} missing from {kinds:?}");
    }
}

#[test]
fn expiry_scenario_passes_and_its_mutation_fails() {
    let o = nvlog(&["crashtest", "--scenario", "expiry"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("recovered: a31xyz"), "{}", stdout(&o));

    let m = nvlog(&["crashtest", "--scenario", "expiry", "--mutation", "no-expiry"]);
    assert_eq!(m.status.code(), Some(1));
    assert!(stdout(&m).contains("recovered: abcxyz"), "{}", stdout(&m));
    assert_eq!(error_kind(&m), "crash_violation");
}

#[test]
fn small_campaign_reports_json() {
    let o = nvlog(&["crashtest", "--workloads", "3", "--seed", "11", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["workloads"], 3);
}

#[test]
fn errors_are_machine_parsable() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.img").display().to_string();
    let o = nvlog(&["recover", "--nvm", &missing, "--disk", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_kind(&o), "not_found");

    let o = nvlog(&["bench", "--set", "sensitivity"]);
    assert_eq!(error_kind(&o), "config");

    let o = nvlog(&["bench", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_kind(&o), "usage");
}
