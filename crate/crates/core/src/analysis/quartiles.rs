use serde::{Deserialize, Serialize};

use super::moderator::cluster_robust_ols;
use super::AnalysisError;
use crate::estimators::{bonferroni, normal_p_value, stars};
use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileBin {
    /// `Q1`..`Q4`, or a joined label such as `Q2-Q3` after merging.
    pub label: String,
    pub lower: f64,
    pub upper: f64,
    pub n: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub a: String,
    pub b: String,
    /// Mean of `b` minus mean of `a`.
    pub difference: f64,
    pub std_error: f64,
    pub p_value: f64,
    pub p_adjusted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileContrastTable {
    pub variable: String,
    /// 25th, 50th and 75th percentiles as order statistics.
    pub boundaries: [f64; 3],
    pub bins: Vec<QuartileBin>,
    pub contrasts: Vec<Contrast>,
    pub merged: bool,
    pub correction: String,
}

/// Order statistic `x_(ceil(n p))` of the sorted sample.
pub fn order_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let k = ((n as f64 * p).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

/// Bins by sample quartiles (upper edges inclusive), merges bins emptied by
/// ties, and compares every pair of bin means with cluster-robust SEs.
pub fn quartile_contrasts(
    variable: &str,
    cates: &[f64],
    values: &[f64],
    clusters: &[usize],
) -> Result<QuartileContrastTable, AnalysisError> {
    if cates.len() != values.len() || cates.len() != clusters.len() {
        return Err(AnalysisError::LengthMismatch(format!(
            "{} cates, {} values, {} clusters",
            cates.len(),
            values.len(),
            clusters.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite(variable.to_string()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.is_empty() {
        return Err(AnalysisError::DegenerateQuartiles {
            variable: variable.to_string(),
            distinct_bins: 0,
        });
    }
    let q = [0.25, 0.5, 0.75].map(|p| order_quantile(&sorted, p));
    let raw_bin = |v: f64| q.iter().filter(|&&b| v > b).count();

    let mut counts = [0usize; 4];
    for &v in values {
        counts[raw_bin(v)] += 1;
    }
    // empty quartiles join the next non-empty one
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut pending: Vec<usize> = Vec::new();
    for k in 0..4 {
        pending.push(k);
        if counts[k] > 0 {
            groups.push(std::mem::take(&mut pending));
        }
    }
    if let (false, Some(last)) = (pending.is_empty(), groups.last_mut()) {
        last.extend(pending);
    }
    let merged = groups.len() < 4;
    if groups.len() < 2 {
        return Err(AnalysisError::DegenerateQuartiles {
            variable: variable.to_string(),
            distinct_bins: groups.len(),
        });
    }
    let group_of = |v: f64| {
        let b = raw_bin(v);
        groups.iter().position(|g| g.contains(&b)).expect("every quartile is grouped")
    };
    let g = groups.len();
    let assign: Vec<usize> = values.iter().map(|&v| group_of(v)).collect();
    let x = DMatrix::from_fn(cates.len(), g, |i, j| (assign[i] == j) as u8 as f64);
    let (beta, cov, _) = cluster_robust_ols(cates, &x, clusters, true)?;

    let label = |grp: &[usize]| {
        if grp.len() == 1 {
            format!("Q{}", grp[0] + 1)
        } else {
            format!("Q{}-Q{}", grp[0] + 1, grp[grp.len() - 1] + 1)
        }
    };
    let labels: Vec<String> = groups.iter().map(|grp| label(grp)).collect();
    let edges = [sorted[0], q[0], q[1], q[2], sorted[sorted.len() - 1]];
    let bins = groups
        .iter()
        .enumerate()
        .map(|(j, grp)| {
            let se = cov[(j, j)].max(0.0).sqrt();
            QuartileBin {
                label: labels[j].clone(),
                lower: edges[grp[0]],
                upper: edges[grp[grp.len() - 1] + 1],
                n: assign.iter().filter(|&&a| a == j).count(),
                mean: beta[j],
                ci_low: beta[j] - 1.96 * se,
                ci_high: beta[j] + 1.96 * se,
            }
        })
        .collect();

    let mut contrasts = Vec::new();
    for a in 0..g {
        for b in a + 1..g {
            let diff = beta[b] - beta[a];
            let var = cov[(a, a)] + cov[(b, b)] - 2.0 * cov[(a, b)];
            let se = var.max(0.0).sqrt();
            contrasts.push(Contrast {
                a: labels[a].clone(),
                b: labels[b].clone(),
                difference: diff,
                std_error: se,
                p_value: normal_p_value(if se > 0.0 { diff / se } else { f64::NAN }),
                p_adjusted: 0.0,
            });
        }
    }
    let raw: Vec<f64> = contrasts.iter().map(|c| c.p_value).collect();
    for (c, p) in contrasts.iter_mut().zip(bonferroni(&raw, raw.len())) {
        c.p_adjusted = p;
    }
    Ok(QuartileContrastTable {
        variable: variable.to_string(),
        boundaries: q,
        bins,
        contrasts,
        merged,
        correction: "bonferroni".into(),
    })
}

impl QuartileContrastTable {
    /// `quartile,mean,ci_low,ci_high`, one row per bin.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("quartile,mean,ci_low,ci_high\n");
        for b in &self.bins {
            out.push_str(&format!("{},{},{},{}\n", b.label, b.mean, b.ci_low, b.ci_high));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let short = |v: f64| {
            let s = format!("{v:.4}");
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        };
        let mut out = format!(
            "**{}** (Q25 = {}, median = {}, Q75 = {})\n\n| Bin | Range | n | Mean CATE | 95% CI |\n|---|---|---|---|---|\n",
            self.variable,
            short(self.boundaries[0]),
            short(self.boundaries[1]),
            short(self.boundaries[2])
        );
        for b in &self.bins {
            out.push_str(&format!(
                "| {} | [{}, {}] | {} | {:.2} | ({:.2}, {:.2}) |\n",
                b.label,
                short(b.lower),
                short(b.upper),
                b.n,
                b.mean,
                b.ci_low,
                b.ci_high
            ));
        }
        out.push_str("\n| Contrast | Difference | p (Bonferroni) |\n|---|---|---|\n");
        for c in &self.contrasts {
            out.push_str(&format!(
                "| {} - {} | {:.2}{} | {:.4} |\n",
                c.b,
                c.a,
                c.difference,
                stars(c.p_adjusted),
                c.p_adjusted
            ));
        }
        if self.merged {
            out.push_str("\nTied values emptied at least one quartile; empty bins were merged.\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn message_count_quartile_edges() {
        // 4 values at or below 9, 4 in (9, 14], 4 in (14, 23], 4 above
        let v = [3.0, 5.0, 8.0, 9.0, 10.0, 12.0, 13.0, 14.0, 15.0, 18.0, 20.0, 23.0, 25.0, 30.0, 41.0, 60.0];
        let cates: Vec<f64> = (0..16).map(|i| i as f64 * 0.01).collect();
        let cl: Vec<usize> = (0..16).collect();
        let t = quartile_contrasts("messages_total", &cates, &v, &cl).unwrap();
        assert_eq!(t.boundaries, [9.0, 14.0, 23.0]);
        assert_eq!(t.bins.iter().map(|b| b.n).collect::<Vec<_>>(), vec![4, 4, 4, 4]);
        assert_eq!(t.contrasts.len(), 6);
        assert!(!t.merged);
    }

    #[test]
    fn bins_partition_and_means_match_direct_averages() {
        let v: Vec<f64> = (0..40).map(|i| ((i * 7) % 40) as f64).collect();
        let cates: Vec<f64> = v.iter().map(|x| 0.01 * x + if (*x as usize) % 2 == 0 { 0.003 } else { -0.002 }).collect();
        let cl: Vec<usize> = (0..40).map(|i| i / 3).collect();
        let t = quartile_contrasts("x", &cates, &v, &cl).unwrap();
        assert_eq!(t.bins.iter().map(|b| b.n).sum::<usize>(), 40);
        for (k, b) in t.bins.iter().enumerate() {
            let inside = |x: f64| (x > b.lower || (k == 0 && x == b.lower)) && x <= b.upper;
            let members: Vec<f64> = (0..40).filter(|&i| inside(v[i])).map(|i| cates[i]).collect();
            let direct = members.iter().sum::<f64>() / members.len() as f64;
            assert!((b.mean - direct).abs() < 1e-12, "{}", b.label);
        }
        let q41 = t.contrasts.iter().find(|c| c.a == "Q1" && c.b == "Q4").unwrap();
        assert!(q41.difference > 0.0 && q41.p_adjusted < 0.05);
        assert!(t.contrasts.iter().all(|c| c.p_adjusted >= c.p_value));
    }

    #[test]
    fn ties_merge_bins() {
        let v = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 3.0];
        let cates = [0.0, 0.1, 0.0, 0.1, 0.0, 0.1, 0.3, 0.2];
        let cl: Vec<usize> = (0..8).collect();
        let t = quartile_contrasts("x", &cates, &v, &cl).unwrap();
        assert!(t.merged);
        assert_eq!(t.bins.iter().map(|b| b.n).sum::<usize>(), 8);
        assert_eq!(t.bins[0].label, "Q1");
        assert_eq!(t.bins[1].label, "Q2-Q4");
        assert_eq!(t.contrasts.len(), t.bins.len() * (t.bins.len() - 1) / 2);
    }

    #[test]
    fn constant_variable_is_degenerate() {
        let err = quartile_contrasts("x", &[0.1; 5], &[2.0; 5], &[0, 1, 2, 3, 4]);
        assert!(matches!(err, Err(AnalysisError::DegenerateQuartiles { distinct_bins: 1, .. })));
    }

    #[test]
    fn csv_is_plot_ready() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let t = quartile_contrasts("x", &v.map(|x| x / 100.0), &v, &[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        let csv = t.to_csv();
        assert!(csv.starts_with("quartile,mean,ci_low,ci_high\nQ1,"));
        assert_eq!(csv.lines().count(), 5);
    }
}
