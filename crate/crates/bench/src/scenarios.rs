//! The benchmark scenarios.
//!
//! Every latency sample is the time from an event's deadline to the moment
//! user code running inside a poll hook observes it. On the virtual clock a
//! dummy poll costs `virtual_poll_cost_ns` and reads the time halfway through
//! that cost, so results are exact functions of the configuration.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Barrier, Mutex, PoisonError};
use std::thread;

use rand::{rngs::StdRng, Rng, SeedableRng};
use thiserror::Error;

use progress_engine::collective::{allreduce_start, baseline_allreduce_start, AllreduceHandle};
use progress_engine::{
    Clock, ContextId, Engine, Hints, LatencyModel, NoopOps, PollOutcome, Request, Stream, World,
};

use crate::config::{BenchConfig, Scenario};
use crate::stats::LatencyStats;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Engine(#[from] progress_engine::Error),
    #[error("{impl_name} allreduce at size {size} returned a wrong sum on rank {rank}")]
    WrongSum {
        impl_name: &'static str,
        size: usize,
        rank: usize,
    },
    #[error("{callbacks} callbacks fired for {requests} requests")]
    CallbackCount { callbacks: usize, requests: usize },
}

/// One row of a scenario's output.
#[derive(Clone, Debug)]
pub struct Point {
    /// Leading CSV columns identifying the row.
    pub labels: Vec<String>,
    pub stats: LatencyStats,
    /// Virtual time of one pass over the pending tasks (virtual clock only).
    pub pass_cost_ns: Option<u64>,
    /// Completion callbacks fired (request-events only).
    pub callbacks: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub scenario: Scenario,
    pub header: &'static str,
    pub points: Vec<Point>,
}

impl Report {
    /// Mean latency of every point, in row order.
    pub fn means(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.stats.mean).collect()
    }

    /// Points whose labels start with `label`.
    pub fn series(&self, label: &str) -> Vec<&Point> {
        self.points.iter().filter(|p| p.labels[0] == label).collect()
    }
}

pub fn run(scenario: Scenario, cfg: &BenchConfig) -> Result<Report, BenchError> {
    match scenario {
        Scenario::PendingTasks => pending_tasks(cfg),
        Scenario::PollOverhead => poll_overhead(cfg),
        Scenario::ThreadContention => thread_contention(cfg),
        Scenario::TaskClass => task_class(cfg),
        Scenario::RequestEvents => request_events(cfg),
        Scenario::Allreduce => allreduce(cfg),
    }
}

/// 1, 2, 4, ... up to `max`.
pub fn powers_of_two(max: usize) -> Vec<usize> {
    std::iter::successors(Some(1usize), |n| n.checked_mul(2))
        .take_while(|n| *n <= max)
        .collect()
}

pub const POLL_DELAYS_US: [u64; 6] = [0, 1, 2, 5, 10, 50];
pub const THREAD_COUNTS: [usize; 4] = [1, 2, 4, 8];

/// Time source of dummy tasks.
#[derive(Clone)]
struct Probe {
    clock: Clock,
    poll_cost_ns: u64,
}

impl Probe {
    fn new(cfg: &BenchConfig) -> Self {
        if cfg.virtual_clock {
            Probe {
                clock: Clock::virtual_time(),
                poll_cost_ns: cfg.virtual_poll_cost_ns,
            }
        } else {
            Probe {
                clock: Clock::monotonic(),
                poll_cost_ns: 0,
            }
        }
    }

    #[inline]
    fn observe(&self) -> u64 {
        let half = self.poll_cost_ns / 2;
        self.clock.advance(half);
        let t = self.clock.now_ns();
        self.clock.advance(self.poll_cost_ns - half);
        t
    }

    fn now(&self) -> u64 {
        self.clock.now_ns()
    }
}

fn micros(ns: u64) -> f64 {
    ns as f64 / 1_000.0
}

type Sink = Arc<Mutex<Vec<f64>>>;

fn drain(sink: &Sink) -> Vec<f64> {
    std::mem::take(&mut *sink.lock().unwrap_or_else(PoisonError::into_inner))
}

/// One warm-up run, then `reps` measured runs.
fn repeat<F>(reps: usize, mut run: F) -> Result<LatencyStats, BenchError>
where
    F: FnMut() -> Result<Vec<f64>, BenchError>,
{
    run()?;
    let mut samples = Vec::new();
    for _ in 0..reps {
        samples.extend(run()?);
    }
    Ok(LatencyStats::from_samples(samples))
}

/// Registers a task that records its latency once `deadline` has passed
/// and otherwise burns `delay_ns` before returning PENDING.
fn start_dummy(
    engine: &Engine,
    stream: &Stream,
    probe: &Probe,
    deadline: u64,
    delay_ns: u64,
    counter: &Arc<AtomicUsize>,
    sink: &Sink,
) -> Result<(), BenchError> {
    let (probe, counter, sink) = (probe.clone(), Arc::clone(counter), Arc::clone(sink));
    engine.async_start(
        move |_thing| {
            let t = probe.observe();
            if t >= deadline {
                sink.lock()
                    .unwrap_or_else(PoisonError::into_inner)
                    .push(micros(t - deadline));
                counter.fetch_sub(1, Ordering::AcqRel);
                PollOutcome::Done
            } else {
                if delay_ns > 0 {
                    probe.clock.busy_wait(delay_ns);
                }
                PollOutcome::Pending
            }
        },
        (),
        stream,
    )?;
    Ok(())
}

/// `n` independent dummy tasks on one stream, progressed until all retire.
/// Returns the samples and the cost of the first pass.
fn dummy_run(probe: &Probe, n: usize, duration_ns: u64, delay_ns: u64) -> Result<(Vec<f64>, u64), BenchError> {
    let engine = Engine::new();
    let stream = engine.null_stream();
    let counter = Arc::new(AtomicUsize::new(n));
    let sink: Sink = Arc::new(Mutex::new(Vec::with_capacity(n)));
    for _ in 0..n {
        let deadline = probe.now() + duration_ns;
        start_dummy(&engine, stream, probe, deadline, delay_ns, &counter, &sink)?;
    }
    let t0 = probe.now();
    engine.stream_progress(stream)?;
    let first_pass = probe.now() - t0;
    while counter.load(Ordering::Acquire) > 0 {
        engine.stream_progress(stream)?;
    }
    Ok((drain(&sink), first_pass))
}

pub fn pending_tasks(cfg: &BenchConfig) -> Result<Report, BenchError> {
    let probe = Probe::new(cfg);
    let mut points = Vec::new();
    for n in powers_of_two(cfg.num_tasks) {
        let mut pass_cost = 0;
        let stats = repeat(cfg.repetitions, || {
            let (samples, pass) = dummy_run(&probe, n, cfg.task_duration_ns(), 0)?;
            pass_cost = pass;
            Ok(samples)
        })?;
        points.push(Point {
            labels: vec![n.to_string()],
            stats,
            pass_cost_ns: cfg.virtual_clock.then_some(pass_cost),
            callbacks: None,
        });
    }
    Ok(Report {
        scenario: Scenario::PendingTasks,
        header: "num_pending,mean_latency_us,p99_latency_us",
        points,
    })
}

pub fn poll_overhead(cfg: &BenchConfig) -> Result<Report, BenchError> {
    let probe = Probe::new(cfg);
    let mut points = Vec::new();
    for delay_us in POLL_DELAYS_US.into_iter().filter(|d| *d as f64 <= cfg.poll_delay_us) {
        let mut pass_cost = 0;
        let stats = repeat(cfg.repetitions, || {
            let (samples, pass) = dummy_run(&probe, cfg.tasks_per_run, cfg.task_duration_ns(), delay_us * 1_000)?;
            pass_cost = pass;
            Ok(samples)
        })?;
        points.push(Point {
            labels: vec![delay_us.to_string()],
            stats,
            pass_cost_ns: cfg.virtual_clock.then_some(pass_cost),
            callbacks: None,
        });
    }
    Ok(Report {
        scenario: Scenario::PollOverhead,
        header: "poll_delay_us,mean_latency_us,p99_latency_us",
        points,
    })
}

fn contention_run(cfg: &BenchConfig, threads: usize, per_stream: bool, run_idx: u64) -> Result<Vec<f64>, BenchError> {
    let engine = Engine::new();
    let probe = Probe {
        clock: Clock::monotonic(),
        poll_cost_ns: 0,
    };
    let sink: Sink = Arc::new(Mutex::new(Vec::new()));
    let barrier = Barrier::new(threads);
    let jitter_ns = (cfg.jitter_us * 1_000.0) as u64;
    thread::scope(|scope| -> Result<(), BenchError> {
        let workers: Vec<_> = (0..threads)
            .map(|t| {
                let (engine, probe, sink, barrier) = (&engine, &probe, &sink, &barrier);
                scope.spawn(move || -> Result<(), BenchError> {
                    let stream = if per_stream {
                        engine.stream_create(&Hints::new())?
                    } else {
                        engine.null_stream().clone()
                    };
                    let mut rng = StdRng::seed_from_u64(cfg.seed ^ (run_idx << 16) ^ t as u64);
                    let counter = Arc::new(AtomicUsize::new(cfg.tasks_per_run));
                    barrier.wait();
                    for _ in 0..cfg.tasks_per_run {
                        let jitter = if jitter_ns > 0 { rng.gen_range(0..jitter_ns) } else { 0 };
                        let deadline = probe.now() + cfg.task_duration_ns() + jitter;
                        start_dummy(engine, &stream, probe, deadline, 0, &counter, sink)?;
                    }
                    while counter.load(Ordering::Acquire) > 0 {
                        engine.stream_progress(&stream)?;
                    }
                    if per_stream {
                        engine.stream_free(stream)?;
                    }
                    Ok(())
                })
            })
            .collect();
        for w in workers {
            w.join().expect("worker panicked")?;
        }
        Ok(())
    })?;
    Ok(drain(&sink))
}

pub fn thread_contention(cfg: &BenchConfig) -> Result<Report, BenchError> {
    let mut variants = vec![("shared", false)];
    if cfg.use_per_stream {
        variants.push(("per_stream", true));
    }
    let mut points = Vec::new();
    for (label, per_stream) in variants {
        for threads in THREAD_COUNTS.into_iter().filter(|t| *t <= cfg.num_threads) {
            let mut run_idx = 0;
            let stats = repeat(cfg.repetitions, || {
                run_idx += 1;
                contention_run(cfg, threads, per_stream, run_idx)
            })?;
            points.push(Point {
                labels: vec![label.to_owned(), threads.to_string()],
                stats,
                pass_cost_ns: None,
                callbacks: None,
            });
        }
    }
    Ok(Report {
        scenario: Scenario::ThreadContention,
        header: "variant,num_threads,mean_latency_us,p99_latency_us",
        points,
    })
}

/// Application-managed in-order queue drained by a single hook.
struct TaskQueue {
    /// (enqueue index, deadline)
    entries: VecDeque<(usize, u64)>,
    probe: Probe,
    sink: Sink,
    retired: Arc<Mutex<Vec<usize>>>,
}

/// Returns the latency samples and the enqueue indices in retirement order.
fn task_class_run(probe: &Probe, n: usize, duration_ns: u64) -> Result<(Vec<f64>, Vec<usize>), BenchError> {
    let engine = Engine::new();
    let stream = engine.null_stream();
    let sink: Sink = Arc::new(Mutex::new(Vec::with_capacity(n)));
    let retired = Arc::new(Mutex::new(Vec::with_capacity(n)));
    let mut queue = TaskQueue {
        entries: VecDeque::with_capacity(n),
        probe: probe.clone(),
        sink: Arc::clone(&sink),
        retired: Arc::clone(&retired),
    };
    for i in 0..n {
        queue.entries.push_back((i, probe.now() + duration_ns));
    }
    engine.async_start(
        |thing| {
            let q = thing.state();
            let tm = q.probe.observe();
            let mut sink = q.sink.lock().unwrap_or_else(PoisonError::into_inner);
            let mut retired = q.retired.lock().unwrap_or_else(PoisonError::into_inner);
            while let Some(&(idx, head)) = q.entries.front() {
                if tm < head {
                    break;
                }
                q.entries.pop_front();
                sink.push(micros(tm - head));
                retired.push(idx);
            }
            if q.entries.is_empty() {
                PollOutcome::Done
            } else {
                PollOutcome::Pending
            }
        },
        queue,
        stream,
    )?;
    while engine.pending_tasks(stream) > 0 {
        engine.stream_progress(stream)?;
    }
    let order = std::mem::take(&mut *retired.lock().unwrap_or_else(PoisonError::into_inner));
    Ok((drain(&sink), order))
}

/// Enqueue indices of one task-class run of `n` tasks, in retirement order.
pub fn task_class_retirement(cfg: &BenchConfig, n: usize) -> Result<Vec<usize>, BenchError> {
    Ok(task_class_run(&Probe::new(cfg), n, cfg.task_duration_ns())?.1)
}

pub fn task_class(cfg: &BenchConfig) -> Result<Report, BenchError> {
    let probe = Probe::new(cfg);
    let mut points = Vec::new();
    for n in powers_of_two(cfg.num_tasks) {
        let stats = repeat(cfg.repetitions, || Ok(task_class_run(&probe, n, cfg.task_duration_ns())?.0))?;
        points.push(Point {
            labels: vec![n.to_string()],
            stats,
            pass_cost_ns: None,
            callbacks: None,
        });
    }
    Ok(Report {
        scenario: Scenario::TaskClass,
        header: "num_pending,mean_latency_us,p99_latency_us",
        points,
    })
}

struct Completer {
    /// (deadline, request), sorted by deadline.
    due: VecDeque<(u64, Request)>,
    probe: Probe,
}

struct Scanner {
    requests: Vec<Option<(u64, Request)>>,
    probe: Probe,
    sink: Sink,
    callbacks: Arc<AtomicUsize>,
}

fn request_events_run(cfg: &BenchConfig, n: usize, run_idx: u64) -> Result<(Vec<f64>, usize), BenchError> {
    let engine = Engine::new();
    let stream = engine.null_stream();
    let probe = Probe::new(cfg);
    let sink: Sink = Arc::new(Mutex::new(Vec::with_capacity(n)));
    let callbacks = Arc::new(AtomicUsize::new(0));
    let mut rng = StdRng::seed_from_u64(cfg.seed ^ (run_idx << 20) ^ n as u64);
    // completions spread over n * jitter so each is handled before the next
    let window_ns = (cfg.jitter_us * 1_000.0) as u64 * n as u64;
    let start = probe.now() + cfg.task_duration_ns();
    let mut requests: Vec<(u64, Request)> = (0..n)
        .map(|_| {
            let offset = if window_ns > 0 { rng.gen_range(0..window_ns) } else { 0 };
            (start + offset, Request::start_generalized(NoopOps))
        })
        .collect();
    let scanner = Scanner {
        requests: requests.iter().cloned().map(Some).collect(),
        probe: probe.clone(),
        sink: Arc::clone(&sink),
        callbacks: Arc::clone(&callbacks),
    };
    requests.sort_by_key(|(d, _)| *d);
    let completer = Completer {
        due: requests.into(),
        probe: probe.clone(),
    };

    // stands in for the native progress that completes the requests
    engine.async_start(
        |thing| {
            let c = thing.state();
            let tm = c.probe.observe();
            while c.due.front().is_some_and(|(d, _)| *d <= tm) {
                let (_, req) = c.due.pop_front().expect("checked");
                req.complete().expect("completed once");
            }
            if c.due.is_empty() {
                PollOutcome::Done
            } else {
                PollOutcome::Pending
            }
        },
        completer,
        stream,
    )?;
    engine.async_start(
        |thing| {
            let s = thing.state();
            let mut pending = 0;
            for slot in s.requests.iter_mut() {
                let Some((deadline, req)) = slot else { continue };
                if req.is_complete().unwrap_or(true) {
                    let t = s.probe.observe();
                    s.sink
                        .lock()
                        .unwrap_or_else(PoisonError::into_inner)
                        .push(micros(t - *deadline));
                    s.callbacks.fetch_add(1, Ordering::Relaxed);
                    let _ = req.free();
                    *slot = None;
                } else {
                    pending += 1;
                }
            }
            if pending == 0 {
                PollOutcome::Done
            } else {
                PollOutcome::Pending
            }
        },
        scanner,
        stream,
    )?;
    while engine.pending_tasks(stream) > 0 {
        engine.stream_progress(stream)?;
    }
    let fired = callbacks.load(Ordering::Relaxed);
    if fired != n {
        return Err(BenchError::CallbackCount {
            callbacks: fired,
            requests: n,
        });
    }
    Ok((drain(&sink), fired))
}

pub fn request_events(cfg: &BenchConfig) -> Result<Report, BenchError> {
    let mut points = Vec::new();
    for n in powers_of_two(cfg.num_requests) {
        let mut run_idx = 0;
        let mut fired = 0;
        let stats = repeat(cfg.repetitions, || {
            run_idx += 1;
            let (samples, f) = request_events_run(cfg, n, run_idx)?;
            fired = f;
            Ok(samples)
        })?;
        points.push(Point {
            labels: vec![n.to_string()],
            stats,
            pass_cost_ns: None,
            callbacks: Some(fired),
        });
    }
    Ok(Report {
        scenario: Scenario::RequestEvents,
        header: "num_requests,mean_overhead_us,p99_overhead_us",
        points,
    })
}

/// Which allreduce implementation a row measures.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum AllreduceImpl {
    RecursiveDoubling,
    Baseline,
}

impl AllreduceImpl {
    pub fn name(self) -> &'static str {
        match self {
            AllreduceImpl::RecursiveDoubling => "recursive_doubling",
            AllreduceImpl::Baseline => "baseline",
        }
    }
}

/// Runs one allreduce over every rank of `world` from a single progress
/// thread and returns its latency in microseconds, after checking every
/// rank's result against a sequential sum.
fn allreduce_once(world: &World, which: AllreduceImpl, count: usize, rng: &mut StdRng) -> Result<f64, BenchError> {
    let engine = world.engine();
    let stream = engine.null_stream();
    let size = world.size();
    let inputs: Vec<Vec<i32>> = (0..size)
        .map(|_| (0..count).map(|_| rng.gen_range(-1000..1000)).collect())
        .collect();
    let mut want = vec![0i32; count];
    for v in &inputs {
        for (w, x) in want.iter_mut().zip(v) {
            *w += x;
        }
    }
    let t0 = world.clock().now_ns();
    let handles: Vec<AllreduceHandle> = world
        .endpoints()
        .iter()
        .zip(inputs)
        .map(|(ep, buf)| match which {
            AllreduceImpl::RecursiveDoubling => allreduce_start(ep, buf, count, ContextId::DEFAULT, stream),
            AllreduceImpl::Baseline => baseline_allreduce_start(ep, buf, count, ContextId::DEFAULT, stream),
        })
        .collect::<Result<_, _>>()?;
    while !handles.iter().all(AllreduceHandle::is_done) {
        engine.stream_progress(stream)?;
    }
    let elapsed = world.clock().now_ns() - t0;
    for (rank, h) in handles.iter().enumerate() {
        let got = h.take_result().expect("done")?;
        if got != want {
            return Err(BenchError::WrongSum {
                impl_name: which.name(),
                size,
                rank,
            });
        }
    }
    Ok(micros(elapsed))
}

pub fn allreduce(cfg: &BenchConfig) -> Result<Report, BenchError> {
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut points = Vec::new();
    let sizes = powers_of_two(cfg.world_size).into_iter().filter(|s| *s >= 2);
    for size in sizes {
        for which in [AllreduceImpl::RecursiveDoubling, AllreduceImpl::Baseline] {
            let engine = Engine::new();
            let clock = if cfg.virtual_clock {
                Clock::virtual_time()
            } else {
                Clock::monotonic()
            };
            let world = World::with_clock(&engine, size, LatencyModel::new(cfg.nic_latency_ns, 0), clock)?;
            let stats = repeat(cfg.repetitions, || Ok(vec![allreduce_once(&world, which, cfg.count, &mut rng)?]))?;
            points.push(Point {
                labels: vec![size.to_string(), which.name().to_owned()],
                stats,
                pass_cost_ns: None,
                callbacks: None,
            });
        }
    }
    Ok(Report {
        scenario: Scenario::Allreduce,
        header: "world_size,impl,mean_latency_us,p99_latency_us",
        points,
    })
}
