use progress_bench::scenarios::{self, powers_of_two, POLL_DELAYS_US};
use progress_bench::{csv, BenchConfig, Scenario};

fn virtual_cfg() -> BenchConfig {
    BenchConfig {
        virtual_clock: true,
        task_duration_s: 0.001,
        repetitions: 3,
        ..BenchConfig::default()
    }
}

fn real_cfg() -> BenchConfig {
    BenchConfig {
        task_duration_s: 0.0005,
        repetitions: 2,
        num_tasks: 64,
        num_requests: 64,
        ..BenchConfig::default()
    }
}

/// Straight-line model of `n` dummy tasks sharing one deadline on the
/// virtual clock: every poll costs `cost`, the clock is read halfway, and a
/// still-pending task burns `delay` more.
fn simulate_dummy_latencies(n: usize, deadline: u64, cost: u64, delay: u64) -> Vec<f64> {
    let mut live: Vec<usize> = (0..n).collect();
    let mut t = 0u64;
    let mut out = Vec::new();
    while !live.is_empty() {
        let mut next = Vec::new();
        for task in live {
            t += cost / 2;
            let seen = t;
            t += cost - cost / 2;
            if seen >= deadline {
                out.push((seen - deadline) as f64 / 1_000.0);
            } else {
                t += delay;
                next.push(task);
            }
        }
        live = next;
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn virtual_pending_tasks_match_the_model() {
    let cfg = virtual_cfg();
    let report = scenarios::pending_tasks(&cfg).unwrap();
    assert_eq!(report.points.len(), 11);
    for p in &report.points {
        let n: usize = p.labels[0].parse().unwrap();
        let want = simulate_dummy_latencies(n, cfg.task_duration_ns(), cfg.virtual_poll_cost_ns, 0);
        assert!((p.stats.mean - mean(&want)).abs() < 1e-9, "n={n}: {} vs {}", p.stats.mean, mean(&want));
        assert_eq!(p.pass_cost_ns, Some(n as u64 * cfg.virtual_poll_cost_ns));
        // warm-up excluded
        assert_eq!(p.stats.count(), n * cfg.repetitions);
    }
}

#[test]
fn virtual_poll_overhead_matches_the_model() {
    let cfg = virtual_cfg();
    let report = scenarios::poll_overhead(&cfg).unwrap();
    let delays: Vec<String> = report.points.iter().map(|p| p.labels[0].clone()).collect();
    assert_eq!(delays, POLL_DELAYS_US.map(|d| d.to_string()));
    for p in &report.points {
        let d: u64 = p.labels[0].parse().unwrap();
        let want = simulate_dummy_latencies(10, cfg.task_duration_ns(), cfg.virtual_poll_cost_ns, d * 1_000);
        assert!((p.stats.mean - mean(&want)).abs() < 1e-9, "delay {d}");
        assert_eq!(p.pass_cost_ns, Some(10 * (cfg.virtual_poll_cost_ns + d * 1_000)));
    }
    // delay 0 leaves a pass of ten plain polls
    assert_eq!(report.points[0].pass_cost_ns, Some(10 * cfg.virtual_poll_cost_ns));
}

#[test]
fn poll_delay_sweep_respects_the_configured_maximum() {
    let cfg = BenchConfig {
        poll_delay_us: 5.0,
        ..virtual_cfg()
    };
    let report = scenarios::poll_overhead(&cfg).unwrap();
    let delays: Vec<&str> = report.points.iter().map(|p| p.labels[0].as_str()).collect();
    assert_eq!(delays, ["0", "1", "2", "5"]);
}

#[test]
fn virtual_task_class_is_exactly_flat() {
    let cfg = virtual_cfg();
    let report = scenarios::task_class(&cfg).unwrap();
    let half_poll = cfg.virtual_poll_cost_ns as f64 / 2_000.0;
    for p in &report.points {
        assert!((p.stats.mean - half_poll).abs() < 1e-12, "{p:?}");
    }
}

#[test]
fn task_class_retires_in_enqueue_order() {
    for cfg in [virtual_cfg(), real_cfg()] {
        let order = scenarios::task_class_retirement(&cfg, 200).unwrap();
        assert_eq!(order, (0..200).collect::<Vec<_>>());
    }
}

#[test]
fn real_clock_sweeps_emit_every_row() {
    let cfg = real_cfg();
    for (scenario, rows) in [
        (Scenario::PendingTasks, powers_of_two(64).len()),
        (Scenario::TaskClass, powers_of_two(64).len()),
        (Scenario::RequestEvents, powers_of_two(64).len()),
        (Scenario::PollOverhead, POLL_DELAYS_US.len()),
    ] {
        let report = scenarios::run(scenario, &cfg).unwrap();
        assert_eq!(report.points.len(), rows, "{scenario}");
        assert!(report.points.iter().all(|p| p.stats.count() > 0));
        assert!(report.points.iter().all(|p| p.stats.samples.iter().all(|s| *s >= 0.0)));
    }
}

#[test]
fn request_events_fire_each_callback_once() {
    let report = scenarios::request_events(&real_cfg()).unwrap();
    for p in &report.points {
        let n: usize = p.labels[0].parse().unwrap();
        assert_eq!(p.callbacks, Some(n));
        assert_eq!(p.stats.count(), n * 2);
    }
}

#[test]
fn thread_contention_emits_both_series() {
    let cfg = BenchConfig {
        num_threads: 4,
        ..real_cfg()
    };
    let report = scenarios::thread_contention(&cfg).unwrap();
    let labels: Vec<String> = report.points.iter().map(|p| p.labels.join(",")).collect();
    assert_eq!(
        labels,
        ["shared,1", "shared,2", "shared,4", "per_stream,1", "per_stream,2", "per_stream,4"]
    );
    for p in &report.points {
        let threads: usize = p.labels[1].parse().unwrap();
        assert_eq!(p.stats.count(), threads * cfg.tasks_per_run * cfg.repetitions);
    }
    let shared_only = scenarios::thread_contention(&BenchConfig {
        use_per_stream: false,
        ..cfg
    })
    .unwrap();
    assert!(shared_only.points.iter().all(|p| p.labels[0] == "shared"));
}

#[test]
fn allreduce_rows_and_csv_schema() {
    let cfg = BenchConfig {
        world_size: 8,
        ..virtual_cfg()
    };
    let report = scenarios::allreduce(&cfg).unwrap();
    let text = csv::to_string(&report);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "world_size,impl,mean_latency_us,p99_latency_us");
    assert_eq!(
        &lines[1..],
        [
            "2,recursive_doubling,1.000,1.000",
            "2,baseline,2.000,2.000",
            "4,recursive_doubling,2.000,2.000",
            "4,baseline,4.000,4.000",
            "8,recursive_doubling,3.000,3.000",
            "8,baseline,8.000,8.000",
        ]
    );
}

#[test]
fn csv_schema_is_stable_across_runs() {
    let cfg = real_cfg();
    let a = csv::to_string(&scenarios::pending_tasks(&cfg).unwrap());
    let b = csv::to_string(&scenarios::pending_tasks(&cfg).unwrap());
    let labels = |s: &str| -> Vec<String> {
        s.lines().map(|l| l.split(',').next().unwrap().to_owned()).collect()
    };
    assert_eq!(labels(&a), labels(&b));
    assert!(a.starts_with("num_pending,mean_latency_us,p99_latency_us\n1,"));
    for line in a.lines().skip(1) {
        for value in line.split(',').skip(1) {
            assert_eq!(value.split('.').nth(1).map(str::len), Some(3), "{line}");
        }
    }
}
