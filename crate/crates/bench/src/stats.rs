//! Latency summaries and trend checks.

/// Summary of a set of latency samples in microseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyStats {
    pub samples: Vec<f64>,
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
}

impl LatencyStats {
    /// Panics on negative or non-finite samples: the harness never produces
    /// them, so one showing up is a measurement bug.
    pub fn from_samples(samples: Vec<f64>) -> Self {
        assert!(
            samples.iter().all(|s| s.is_finite() && *s >= 0.0),
            "latency samples must be finite and non-negative"
        );
        let mean = if samples.is_empty() {
            0.0
        } else {
            samples.iter().sum::<f64>() / samples.len() as f64
        };
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        LatencyStats {
            p50: percentile(&sorted, 50.0),
            p99: percentile(&sorted, 99.0),
            mean,
            samples,
        }
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }
}

/// Nearest-rank percentile of sorted data; 0 for no data.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Least-squares non-decreasing fit (pool adjacent violators).
pub fn isotonic_fit(y: &[f64]) -> Vec<f64> {
    // blocks of (sum, len)
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (s1, n1) = blocks[blocks.len() - 1];
            let (s0, n0) = blocks[blocks.len() - 2];
            if s0 / n0 as f64 <= s1 / n1 as f64 {
                break;
            }
            blocks.pop();
            let last = blocks.len() - 1;
            blocks[last] = (s0 + s1, n0 + n1);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(s, n)| std::iter::repeat_n(s / n as f64, n))
        .collect()
}

/// Result of checking a series for a non-decreasing trend.
#[derive(Clone, Debug, PartialEq)]
pub struct Trend {
    pub fit: Vec<f64>,
    /// Largest `|y - fit| / fit` over the series.
    pub max_relative_residual: f64,
    pub rises: bool,
}

impl Trend {
    /// The series rises overall and no point sits further than
    /// `tolerance` (relative) from its isotonic fit.
    pub fn holds(&self, tolerance: f64) -> bool {
        self.rises && self.max_relative_residual <= tolerance
    }
}

pub fn trend(y: &[f64]) -> Trend {
    let fit = isotonic_fit(y);
    let max_relative_residual = y
        .iter()
        .zip(&fit)
        .map(|(v, f)| if *f > 0.0 { (v - f).abs() / f } else { (v - f).abs() })
        .fold(0.0, f64::max);
    let rises = match (fit.first(), fit.last()) {
        (Some(a), Some(b)) => b > a,
        _ => false,
    };
    Trend {
        fit,
        max_relative_residual,
        rises,
    }
}

/// Ordinary least-squares slope of `y` against `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_of_known_samples() {
        let s = LatencyStats::from_samples((1..=100).map(f64::from).collect());
        assert_eq!(s.mean, 50.5);
        assert_eq!(s.p50, 50.0);
        assert_eq!(s.p99, 99.0);
        assert_eq!(s.count(), 100);
        let one = LatencyStats::from_samples(vec![3.0]);
        assert_eq!((one.mean, one.p50, one.p99), (3.0, 3.0, 3.0));
    }

    #[test]
    #[should_panic(expected = "non-negative")]
    fn negative_sample_is_a_bug() {
        LatencyStats::from_samples(vec![1.0, -0.5]);
    }

    #[test]
    fn isotonic_pools_violators() {
        assert_eq!(isotonic_fit(&[1.0, 3.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(isotonic_fit(&[3.0, 2.0, 1.0]), vec![2.0, 2.0, 2.0]);
        assert_eq!(isotonic_fit(&[1.0, 2.0]), vec![1.0, 2.0]);
    }

    #[test]
    fn trend_detection() {
        assert!(trend(&[1.0, 2.0, 1.9, 4.0, 8.0]).holds(0.1));
        assert!(!trend(&[5.0, 4.0, 3.0]).holds(10.0));
        assert!(!trend(&[1.0, 10.0, 1.0, 11.0]).holds(0.5));
    }

    #[test]
    fn slope_of_a_line() {
        let x = [0.0, 1.0, 2.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v + 1.0).collect();
        assert!((slope(&x, &y) - 3.0).abs() < 1e-12);
    }
}
