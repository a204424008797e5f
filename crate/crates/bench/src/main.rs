use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use progress_bench::{csv, run, BenchConfig, Scenario};

#[derive(Parser)]
#[command(name = "progress-bench", about = "Progress engine latency benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its CSV.
    Run {
        /// One of: pending-tasks, poll-overhead, thread-contention, task-class,
        /// request-events, allreduce.
        scenario: String,
        /// key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output CSV path (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `repetitions` from the config.
        #[arg(long)]
        repetitions: Option<usize>,
        /// Use the deterministic virtual clock.
        #[arg(long)]
        virtual_clock: bool,
    },
}

fn main() -> ExitCode {
    let Command::Run {
        scenario,
        config,
        out,
        repetitions,
        virtual_clock,
    } = Cli::parse().command;

    let scenario: Scenario = match scenario.parse() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let mut cfg = match config {
        Some(path) => match BenchConfig::from_file(&path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::FAILURE;
            }
        },
        None => BenchConfig::default(),
    };
    cfg.scenario = Some(scenario);
    if let Some(r) = repetitions {
        cfg.repetitions = r;
    }
    cfg.virtual_clock |= virtual_clock;
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }

    let report = match run(scenario, &cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {scenario} failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    for p in &report.points {
        let mut note = format!("{}: {} samples", p.labels.join(","), p.stats.count());
        if let Some(ns) = p.pass_cost_ns {
            note.push_str(&format!(", pass {ns} ns"));
        }
        if let Some(n) = p.callbacks {
            note.push_str(&format!(", {n} callbacks"));
        }
        eprintln!("{note}");
    }
    let written = match out {
        Some(path) => File::create(&path).and_then(|f| csv::write_report(&report, BufWriter::new(f))),
        None => csv::write_report(&report, std::io::stdout().lock()),
    };
    if let Err(e) = written {
        eprintln!("error: writing output: {e}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
