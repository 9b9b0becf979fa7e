use serde::{Deserialize, Serialize};

use super::AnalysisError;
use super::quartiles::order_quantile;

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Distribution of the propensity scores and the effect of trimming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub n: usize,
    pub min: f64,
    pub max: f64,
    /// 5th and 95th percentiles.
    pub central_90: [f64; 2],
    pub histogram: Vec<HistogramBin>,
    pub bounds: [f64; 2],
    pub below: usize,
    pub above: usize,
    pub kept: usize,
}

impl OverlapReport {
    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "| Statistic | Value |\n|---|---|\n| Units | {} |\n| Min | {:.4} |\n| Max | {:.4} |\n| Central 90% | [{:.4}, {:.4}] |\n| Below {} | {} |\n| Above {} | {} |\n| Kept | {} |\n",
            self.n,
            self.min,
            self.max,
            self.central_90[0],
            self.central_90[1],
            self.bounds[0],
            self.below,
            self.bounds[1],
            self.above,
            self.kept
        );
        out.push_str("\n| Bin | Count |\n|---|---|\n");
        for b in &self.histogram {
            out.push_str(&format!("| [{:.2}, {:.2}) | {} |\n", b.lower, b.upper, b.count));
        }
        out
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("lower,upper,count\n");
        for b in &self.histogram {
            out.push_str(&format!("{},{},{}\n", b.lower, b.upper, b.count));
        }
        out
    }
}

/// Equal-width histogram on `[0, 1]`; the last bin is closed.
pub fn propensity_histogram(e_hat: &[f64]) -> Vec<HistogramBin> {
    let w = 1.0 / HISTOGRAM_BINS as f64;
    let mut counts = vec![0usize; HISTOGRAM_BINS];
    for &e in e_hat {
        let k = ((e / w).floor() as isize).clamp(0, HISTOGRAM_BINS as isize - 1) as usize;
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin {
            lower: k as f64 * w,
            upper: (k + 1) as f64 * w,
            count,
        })
        .collect()
}

/// Keeps units with `lo <= e_hat <= hi`; returns kept indices and the report.
pub fn trim_by_propensity(e_hat: &[f64], lo: f64, hi: f64) -> Result<(Vec<usize>, OverlapReport), AnalysisError> {
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(AnalysisError::InvalidBounds(lo, hi));
    }
    if e_hat.iter().any(|e| !e.is_finite()) {
        return Err(AnalysisError::NonFinite("propensity".into()));
    }
    let kept: Vec<usize> = (0..e_hat.len()).filter(|&i| e_hat[i] >= lo && e_hat[i] <= hi).collect();
    if kept.is_empty() {
        return Err(AnalysisError::EmptyAfterTrim { lo, hi });
    }
    let mut sorted = e_hat.to_vec();
    sorted.sort_by(f64::total_cmp);
    let report = OverlapReport {
        n: e_hat.len(),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        central_90: [order_quantile(&sorted, 0.05), order_quantile(&sorted, 0.95)],
        histogram: propensity_histogram(e_hat),
        bounds: [lo, hi],
        below: e_hat.iter().filter(|&&e| e < lo).count(),
        above: e_hat.iter().filter(|&&e| e > hi).count(),
        kept: kept.len(),
    };
    Ok((kept, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_bounds_are_identity() {
        let e = [0.0, 0.2, 0.7, 1.0, 0.05];
        let (kept, r) = trim_by_propensity(&e, 0.0, 1.0).unwrap();
        assert_eq!(kept, vec![0, 1, 2, 3, 4]);
        assert_eq!((r.below, r.above), (0, 0));
    }

    #[test]
    fn constant_half_has_no_drops() {
        let (kept, r) = trim_by_propensity(&[0.5; 7], 0.1, 0.9).unwrap();
        assert_eq!(kept.len(), 7);
        assert_eq!(r.histogram.iter().map(|b| b.count).sum::<usize>(), 7);
        assert_eq!(r.histogram[10].count, 7);
    }

    #[test]
    fn drops_are_counted_per_side() {
        let e = [0.01, 0.03, 0.2, 0.5, 0.97, 0.8];
        let (kept, r) = trim_by_propensity(&e, 0.05, 0.95).unwrap();
        assert_eq!(kept, vec![2, 3, 5]);
        assert_eq!((r.below, r.above, r.kept), (2, 1, 3));
        assert!(r.min <= r.max);
        assert_eq!(r.histogram.iter().map(|b| b.count).sum::<usize>(), 6);
    }

    #[test]
    fn everything_trimmed_is_an_error() {
        assert!(matches!(trim_by_propensity(&[0.01, 0.02], 0.1, 0.9), Err(AnalysisError::EmptyAfterTrim { .. })));
        assert!(matches!(trim_by_propensity(&[0.5], 0.6, 0.4), Err(AnalysisError::InvalidBounds(..))));
    }
}
