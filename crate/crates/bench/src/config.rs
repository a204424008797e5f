//! Benchmark configuration: a flat `key=value` file.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must name a
//! [`BenchConfig`] field; anything else is rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value {value:?} for {key}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("{0} must be at least 1")]
    Zero(&'static str),
    #[error("{0} must be a finite non-negative number")]
    Negative(&'static str),
    #[error("unknown scenario {name:?}; valid scenarios: {}", Scenario::NAMES.join(", "))]
    UnknownScenario { name: String },
    #[error("scenario {0} needs real threads and cannot run on the virtual clock")]
    VirtualUnsupported(Scenario),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Scenario {
    PendingTasks,
    PollOverhead,
    ThreadContention,
    TaskClass,
    RequestEvents,
    Allreduce,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::PendingTasks,
        Scenario::PollOverhead,
        Scenario::ThreadContention,
        Scenario::TaskClass,
        Scenario::RequestEvents,
        Scenario::Allreduce,
    ];

    pub const NAMES: [&'static str; 6] = [
        "pending-tasks",
        "poll-overhead",
        "thread-contention",
        "task-class",
        "request-events",
        "allreduce",
    ];

    pub fn name(self) -> &'static str {
        let idx = Self::ALL.iter().position(|s| *s == self).expect("listed");
        Self::NAMES[idx]
    }

    pub fn supports_virtual_clock(self) -> bool {
        !matches!(self, Scenario::ThreadContention | Scenario::RequestEvents)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::NAMES
            .iter()
            .position(|n| *n == s)
            .map(|i| Self::ALL[i])
            .ok_or_else(|| ConfigError::UnknownScenario { name: s.to_owned() })
    }
}

/// Parameters shared by all scenarios. Sweep scenarios treat the count
/// fields as the upper end of their sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub scenario: Option<Scenario>,
    /// Largest pending-task count in the pending-tasks and task-class sweeps.
    pub num_tasks: usize,
    /// Time from task creation to its deadline.
    pub task_duration_s: f64,
    /// Largest injected poll delay in the poll-overhead sweep.
    pub poll_delay_us: f64,
    /// Largest thread count in the thread-contention sweep.
    pub num_threads: usize,
    /// Also run the one-stream-per-thread series of thread-contention.
    pub use_per_stream: bool,
    /// Largest request count in the request-events sweep.
    pub num_requests: usize,
    /// Largest world size in the allreduce sweep.
    pub world_size: usize,
    /// Elements per allreduce.
    pub count: usize,
    pub repetitions: usize,
    pub seed: u64,
    /// Concurrent tasks per run in poll-overhead, per thread in
    /// thread-contention.
    pub tasks_per_run: usize,
    /// Upper bound of the random per-task deadline jitter in
    /// thread-contention; mean spacing of request completions in
    /// request-events.
    pub jitter_us: f64,
    pub virtual_clock: bool,
    /// Virtual time charged for one dummy poll.
    pub virtual_poll_cost_ns: u64,
    /// Per-packet NIC delay of the allreduce world.
    pub nic_latency_ns: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            scenario: None,
            num_tasks: 1024,
            task_duration_s: 1.0,
            poll_delay_us: 50.0,
            num_threads: 8,
            use_per_stream: true,
            num_requests: 1024,
            world_size: 16,
            count: 1,
            repetitions: 5,
            seed: 1,
            tasks_per_run: 10,
            jitter_us: 10.0,
            virtual_clock: false,
            virtual_poll_cost_ns: 100,
            nic_latency_ns: 1_000,
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        line,
        key: key.to_owned(),
        value: value.to_owned(),
    })
}

impl BenchConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Parses config text on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = BenchConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    text: raw.to_owned(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "scenario" => c.scenario = Some(value.parse()?),
                "num_tasks" => c.num_tasks = parse_value(line, key, value)?,
                "task_duration_s" => c.task_duration_s = parse_value(line, key, value)?,
                "poll_delay_us" => c.poll_delay_us = parse_value(line, key, value)?,
                "num_threads" => c.num_threads = parse_value(line, key, value)?,
                "use_per_stream" => c.use_per_stream = parse_value(line, key, value)?,
                "num_requests" => c.num_requests = parse_value(line, key, value)?,
                "world_size" => c.world_size = parse_value(line, key, value)?,
                "count" => c.count = parse_value(line, key, value)?,
                "repetitions" => c.repetitions = parse_value(line, key, value)?,
                "seed" => c.seed = parse_value(line, key, value)?,
                "tasks_per_run" => c.tasks_per_run = parse_value(line, key, value)?,
                "jitter_us" => c.jitter_us = parse_value(line, key, value)?,
                "virtual_clock" => c.virtual_clock = parse_value(line, key, value)?,
                "virtual_poll_cost_ns" => c.virtual_poll_cost_ns = parse_value(line, key, value)?,
                "nic_latency_ns" => c.nic_latency_ns = parse_value(line, key, value)?,
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_owned(),
                    })
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let counts = [
            ("num_tasks", self.num_tasks),
            ("num_threads", self.num_threads),
            ("num_requests", self.num_requests),
            ("world_size", self.world_size),
            ("count", self.count),
            ("repetitions", self.repetitions),
            ("tasks_per_run", self.tasks_per_run),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::Zero(name));
        }
        let durations = [
            ("task_duration_s", self.task_duration_s),
            ("poll_delay_us", self.poll_delay_us),
            ("jitter_us", self.jitter_us),
        ];
        if let Some((name, _)) = durations.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(ConfigError::Negative(name));
        }
        if self.virtual_clock {
            if let Some(s) = self.scenario.filter(|s| !s.supports_virtual_clock()) {
                return Err(ConfigError::VirtualUnsupported(s));
            }
        }
        Ok(())
    }

    pub fn task_duration_ns(&self) -> u64 {
        (self.task_duration_s * 1e9).round() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_key() {
        let text = "\
# sweep
scenario = task-class
num_tasks=64
task_duration_s=0.002
poll_delay_us=10
num_threads=4
use_per_stream=false
num_requests=256
world_size=8
count=7
repetitions=3
seed=42
tasks_per_run=12
jitter_us=0
virtual_clock=true
virtual_poll_cost_ns=50
nic_latency_ns=0
";
        let c = BenchConfig::parse(text).unwrap();
        assert_eq!(c.scenario, Some(Scenario::TaskClass));
        assert_eq!(c.num_tasks, 64);
        assert_eq!(c.task_duration_ns(), 2_000_000);
        assert!(!c.use_per_stream);
        assert_eq!((c.world_size, c.count, c.repetitions, c.seed), (8, 7, 3, 42));
        assert!(c.virtual_clock);
        assert_eq!(c.virtual_poll_cost_ns, 50);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(BenchConfig::parse("bogus=1"), Err(ConfigError::UnknownKey { line: 1, .. })));
        assert!(matches!(BenchConfig::parse("\nnum_tasks"), Err(ConfigError::Syntax { line: 2, .. })));
        assert!(matches!(BenchConfig::parse("count=x"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(BenchConfig::parse("repetitions=0"), Err(ConfigError::Zero("repetitions"))));
        assert!(matches!(BenchConfig::parse("task_duration_s=-1"), Err(ConfigError::Negative(_))));
        assert!(matches!(
            BenchConfig::parse("scenario=thread-contention\nvirtual_clock=true"),
            Err(ConfigError::VirtualUnsupported(Scenario::ThreadContention))
        ));
        let e = BenchConfig::parse("scenario=nope").unwrap_err();
        assert!(e.to_string().contains("pending-tasks, poll-overhead"));
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
    }
}
