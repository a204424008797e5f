use std::fs;
use std::process::Command;

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_progress-bench"))
}

fn config(dir: &tempfile::TempDir, text: &str) -> std::path::PathBuf {
    let path = dir.path().join("bench.cfg");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_writes_csv_with_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&dir, "# quick\ntask_duration_s=0.0002\nnum_tasks=8\n");
    let out = dir.path().join("pending.csv");
    let status = bench()
        .args(["run", "pending-tasks", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--repetitions", "2"])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "num_pending,mean_latency_us,p99_latency_us");
    assert_eq!(lines.len(), 5);
    // sample counts go to stderr
    assert!(String::from_utf8_lossy(&status.stderr).contains("8: 16 samples"));
}

#[test]
fn virtual_clock_flag_gives_exact_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&dir, "task_duration_s=0.001\nnum_tasks=4\n");
    let out = bench()
        .args(["run", "task-class", "--virtual-clock", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "num_pending,mean_latency_us,p99_latency_us\n1,0.050,0.050\n2,0.050,0.050\n4,0.050,0.050\n"
    );
}

#[test]
fn unknown_scenario_exits_2_and_lists_scenarios() {
    let out = bench().args(["run", "warp-drive"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for name in progress_bench::Scenario::NAMES {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn zero_repetitions_is_a_config_error() {
    let out = bench()
        .args(["run", "pending-tasks", "--repetitions", "0"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("repetitions must be at least 1"));
}

#[test]
fn malformed_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    for (text, needle) in [
        ("num_tasks 4\n", "line 1"),
        ("colour=blue\n", "unknown key"),
        ("num_tasks=-3\n", "invalid value"),
    ] {
        let cfg = config(&dir, text);
        let out = bench()
            .args(["run", "pending-tasks", "--config"])
            .arg(&cfg)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(1), "{text}");
        assert!(String::from_utf8_lossy(&out.stderr).contains(needle), "{text}");
    }
    let out = bench()
        .args(["run", "pending-tasks", "--config", "/nonexistent/bench.cfg"])
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read config"));
}

#[test]
fn threaded_scenarios_refuse_the_virtual_clock() {
    let out = bench()
        .args(["run", "thread-contention", "--virtual-clock"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("virtual clock"));
}
