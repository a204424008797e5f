//! Benchmark harness for the progress engine: configuration, the six
//! measurement scenarios, summary statistics and CSV output.

pub mod config;
pub mod csv;
pub mod scenarios;
pub mod stats;

pub use config::{BenchConfig, ConfigError, Scenario};
pub use scenarios::{run, BenchError, Point, Report};
pub use stats::LatencyStats;
