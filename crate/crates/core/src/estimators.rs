//! Residualization, AIPW scores and average effects.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("propensity {value} at unit {unit} is outside (0, 1)")]
    PropensityOutOfRange { unit: usize, value: f64 },
    #[error("no treated units")]
    NoTreatedUnits,
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("no units")]
    Empty,
    #[error("cluster-robust standard error needs at least 2 clusters, got {0}")]
    TooFewClusters(usize),
}

/// Out-of-bag nuisance predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceEstimates {
    pub m_hat: Vec<f64>,
    pub e_hat: Vec<f64>,
}

impl NuisanceEstimates {
    pub fn clamped(mut self, lo: f64, hi: f64) -> NuisanceEstimates {
        self.e_hat.iter_mut().for_each(|e| *e = e.clamp(lo, hi));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualizedData {
    pub y_tilde: Vec<f64>,
    pub z_tilde: Vec<f64>,
}

fn same_len(what: &str, a: usize, b: usize) -> Result<(), EstimatorError> {
    if a != b {
        return Err(EstimatorError::LengthMismatch(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

pub fn residualize(y: &[f64], z: &[f64], nuisance: &NuisanceEstimates) -> Result<ResidualizedData, EstimatorError> {
    same_len("y / z", y.len(), z.len())?;
    same_len("y / m_hat", y.len(), nuisance.m_hat.len())?;
    same_len("y / e_hat", y.len(), nuisance.e_hat.len())?;
    Ok(ResidualizedData {
        y_tilde: y.iter().zip(&nuisance.m_hat).map(|(y, m)| y - m).collect(),
        z_tilde: z.iter().zip(&nuisance.e_hat).map(|(z, e)| z - e).collect(),
    })
}

/// `tau + (z - e) / (e (1 - e)) * (y - m_z)` with arm means rebuilt from
/// `m`, `e` and `tau`.
pub fn aipw_scores(
    y: &[f64],
    z: &[f64],
    nuisance: &NuisanceEstimates,
    tau: &[f64],
) -> Result<Vec<f64>, EstimatorError> {
    same_len("y / z", y.len(), z.len())?;
    same_len("y / m_hat", y.len(), nuisance.m_hat.len())?;
    same_len("y / e_hat", y.len(), nuisance.e_hat.len())?;
    same_len("y / tau", y.len(), tau.len())?;
    let mut out = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let (e, m, t) = (nuisance.e_hat[i], nuisance.m_hat[i], tau[i]);
        if !(e > 0.0 && e < 1.0) {
            return Err(EstimatorError::PropensityOutOfRange { unit: i, value: e });
        }
        let m_z = if z[i] > 0.5 { m + (1.0 - e) * t } else { m - e * t };
        out.push(t + (z[i] - e) / (e * (1.0 - e)) * (y[i] - m_z));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimand {
    #[serde(rename = "ATE")]
    Ate,
    #[serde(rename = "ATT")]
    Att,
    #[serde(rename = "PLACEBO_ATE")]
    PlaceboAte,
}

/// An average effect in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub estimand: Estimand,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub std_error: f64,
    pub n_units: usize,
    pub n_clusters: usize,
    pub p_value: f64,
    pub p_value_adjusted: Option<f64>,
}

pub fn normal_p_value(z: f64) -> f64 {
    if z.is_nan() {
        return 1.0;
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * n.cdf(-z.abs())).min(1.0)
}

pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

impl EffectEstimate {
    /// Mean and cluster-robust standard error of `scores`, scaled to pp.
    pub fn from_scores(scores: &[f64], clusters: &[usize], estimand: Estimand) -> Result<EffectEstimate, EstimatorError> {
        same_len("scores / clusters", scores.len(), clusters.len())?;
        if scores.is_empty() {
            return Err(EstimatorError::Empty);
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let (g, se) = cluster_se_of_mean(scores, clusters, mean);
        if g < 2 {
            return Err(EstimatorError::TooFewClusters(g));
        }
        let z = if se > 0.0 { mean / se } else if mean == 0.0 { 0.0 } else { f64::INFINITY };
        Ok(EffectEstimate {
            estimand,
            estimate: 100.0 * mean,
            ci_low: 100.0 * (mean - 1.96 * se),
            ci_high: 100.0 * (mean + 1.96 * se),
            std_error: 100.0 * se,
            n_units: scores.len(),
            n_clusters: g,
            p_value: normal_p_value(z),
            p_value_adjusted: None,
        })
    }

    pub fn covers(&self, value_pp: f64) -> bool {
        self.ci_low <= value_pp && value_pp <= self.ci_high
    }

    pub fn overlaps(&self, other: &EffectEstimate) -> bool {
        self.ci_low <= other.ci_high && other.ci_low <= self.ci_high
    }

    /// `4.01*** (2.51, 5.51)`, starred by the adjusted p-value when set.
    pub fn cell(&self) -> String {
        let p = self.p_value_adjusted.unwrap_or(self.p_value);
        format!("{:.2}{} ({:.2}, {:.2})", self.estimate, stars(p), self.ci_low, self.ci_high)
    }

    pub fn markdown_row(&self, label: &str) -> String {
        format!("| {label} | {} |", self.cell())
    }
}

/// Cluster count and `sqrt(G/(G-1) * sum_g (sum_{i in g} (s_i - mean))^2) / n`.
fn cluster_se_of_mean(scores: &[f64], clusters: &[usize], mean: f64) -> (usize, f64) {
    let mut sums: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    for (s, &c) in scores.iter().zip(clusters) {
        *sums.entry(c).or_default() += s - mean;
    }
    let g = sums.len();
    if g < 2 {
        return (g, 0.0);
    }
    let ss: f64 = sums.values().map(|v| v * v).sum();
    let n = scores.len() as f64;
    (g, (g as f64 / (g as f64 - 1.0) * ss).sqrt() / n)
}

pub fn aipw_ate(
    y: &[f64],
    z: &[f64],
    nuisance: &NuisanceEstimates,
    tau: &[f64],
    clusters: &[usize],
) -> Result<EffectEstimate, EstimatorError> {
    let scores = aipw_scores(y, z, nuisance, tau)?;
    EffectEstimate::from_scores(&scores, clusters, Estimand::Ate)
}

/// AIPW scores averaged over treated units only.
pub fn aipw_att(
    y: &[f64],
    z: &[f64],
    nuisance: &NuisanceEstimates,
    tau: &[f64],
    clusters: &[usize],
) -> Result<EffectEstimate, EstimatorError> {
    let scores = aipw_scores(y, z, nuisance, tau)?;
    let (s, c): (Vec<f64>, Vec<usize>) = scores
        .iter()
        .zip(clusters)
        .zip(z)
        .filter(|(_, z)| **z > 0.5)
        .map(|((s, c), _)| (*s, *c))
        .unzip();
    if s.is_empty() {
        return Err(EstimatorError::NoTreatedUnits);
    }
    EffectEstimate::from_scores(&s, &c, Estimand::Att)
}

/// Mean treated outcome minus mean control outcome, in pp.
pub fn naive_difference(y: &[f64], z: &[f64]) -> f64 {
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0.0, 0.0, 0.0);
    for (y, z) in y.iter().zip(z) {
        if *z > 0.5 {
            s1 += y;
            n1 += 1.0;
        } else {
            s0 += y;
            n0 += 1.0;
        }
    }
    100.0 * (s1 / n1 - s0 / n0)
}

pub fn bonferroni(p_values: &[f64], m: usize) -> Vec<f64> {
    assert!(m >= 1, "family size must be >= 1");
    p_values.iter().map(|p| (p * m as f64).min(1.0)).collect()
}

/// Pearson correlation.
pub fn cate_correlation(a: &[f64], b: &[f64]) -> Result<f64, EstimatorError> {
    same_len("a / b", a.len(), b.len())?;
    if a.is_empty() {
        return Err(EstimatorError::Empty);
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 {
        return Err(EstimatorError::ZeroVariance("a"));
    }
    if sbb == 0.0 {
        return Err(EstimatorError::ZeroVariance("b"));
    }
    Ok(sab / (saa * sbb).sqrt())
}
