//! CSV output of a [`Report`].

use std::io::{self, Write};

use crate::scenarios::Report;

/// Writes the header and one row per point, values with three decimals.
pub fn write_report<W: Write>(report: &Report, out: W) -> io::Result<()> {
    let mut w = ::csv::Writer::from_writer(out);
    w.write_record(report.header.split(','))?;
    for p in &report.points {
        let values = [format!("{:.3}", p.stats.mean), format!("{:.3}", p.stats.p99)];
        w.write_record(p.labels.iter().chain(&values))?;
    }
    w.flush()
}

pub fn to_string(report: &Report) -> String {
    let mut buf = Vec::new();
    write_report(report, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Scenario;
    use crate::scenarios::Point;
    use crate::stats::LatencyStats;

    #[test]
    fn three_decimals_in_row_order() {
        let report = Report {
            scenario: Scenario::Allreduce,
            header: "world_size,impl,mean_latency_us,p99_latency_us",
            points: vec![
                Point {
                    labels: vec!["2".into(), "baseline".into()],
                    stats: LatencyStats::from_samples(vec![1.0, 2.0]),
                    pass_cost_ns: None,
                    callbacks: None,
                },
                Point {
                    labels: vec!["4".into(), "baseline".into()],
                    stats: LatencyStats::from_samples(vec![0.12345]),
                    pass_cost_ns: None,
                    callbacks: None,
                },
            ],
        };
        assert_eq!(
            to_string(&report),
            "world_size,impl,mean_latency_us,p99_latency_us\n2,baseline,1.500,2.000\n4,baseline,0.123,0.123\n"
        );
    }
}
