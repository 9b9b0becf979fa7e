use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::forest::Design;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub covariate: String,
    /// Partial R^2 with the outcome, given treatment and the other benchmarks.
    pub r2_outcome: f64,
    /// Partial R^2 with the treatment, given the other benchmarks.
    pub r2_treatment: f64,
    /// How many times stronger than this covariate a confounder must be.
    pub ratio_outcome: f64,
    pub ratio_treatment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub t_statistic: f64,
    pub dof: f64,
    pub q: f64,
    pub f_q: f64,
    pub robustness_value: f64,
    pub benchmarks: Vec<Benchmark>,
}

/// `f_q = q |t| / sqrt(dof)`, `RV_q = (sqrt(f^4 + 4 f^2) - f^2) / 2`.
pub fn robustness_value(t: f64, dof: f64, q: f64) -> SensitivityReport {
    assert!(dof > 0.0, "dof must be positive");
    assert!(q > 0.0 && q <= 1.0, "q must lie in (0, 1]");
    let f = q * t.abs() / dof.sqrt();
    let f2 = f * f;
    let rv = 0.5 * ((f2 * f2 + 4.0 * f2).sqrt() - f2);
    SensitivityReport {
        t_statistic: t,
        dof,
        q,
        f_q: f,
        robustness_value: rv,
        benchmarks: Vec::new(),
    }
}

/// Adjusted estimate after removing a confounder with partial R^2 values
/// `r2_yz` (outcome) and `r2_dz` (treatment), in units of the standard error.
pub fn adjusted_t(t: f64, dof: f64, r2_yz: f64, r2_dz: f64) -> f64 {
    let bias = (dof * r2_yz * r2_dz / (1.0 - r2_dz)).sqrt();
    let se_ratio = ((1.0 - r2_yz) / (1.0 - r2_dz)).sqrt() * (dof / (dof - 1.0)).sqrt();
    (t.abs() - bias) / se_ratio
}

fn ols_t_stats(y: &[f64], x: &DMatrix<f64>) -> Result<(Vec<f64>, f64), AnalysisError> {
    let (n, k) = x.shape();
    if n <= k {
        return Err(AnalysisError::RankDeficientDesign(format!("{n} rows for {k} coefficients")));
    }
    let yv = DVector::from_column_slice(y);
    let inv = (x.transpose() * x)
        .cholesky()
        .ok_or_else(|| AnalysisError::RankDeficientDesign("benchmark design".into()))?
        .inverse();
    let beta = &inv * (x.transpose() * &yv);
    let resid = yv - x * &beta;
    let dof = (n - k) as f64;
    let s2 = resid.norm_squared() / dof;
    let t = (0..k).map(|j| beta[j] / (s2 * inv[(j, j)]).sqrt()).collect();
    Ok((t, dof))
}

fn partial_r2(t: f64, dof: f64) -> f64 {
    t * t / (t * t + dof)
}

/// Partial R^2 of each benchmark covariate from the auxiliary regressions
/// `y ~ 1 + z + X` and `z ~ 1 + X`, set against `report`'s RV.
pub fn benchmark(
    report: &mut SensitivityReport,
    y: &[f64],
    z: &[f64],
    covariates: &Design,
    names: &[String],
) -> Result<(), AnalysisError> {
    let n = y.len();
    let p = covariates.n_cols;
    let xy = DMatrix::from_fn(n, p + 2, |i, j| match j {
        0 => 1.0,
        1 => z[i],
        _ => covariates.get(i, j - 2),
    });
    let xd = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { covariates.get(i, j - 1) });
    let (ty, dof_y) = ols_t_stats(y, &xy)?;
    let (td, dof_d) = ols_t_stats(z, &xd)?;
    let rv = report.robustness_value;
    report.benchmarks = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let r2y = partial_r2(ty[j + 2], dof_y);
            let r2d = partial_r2(td[j + 1], dof_d);
            Benchmark {
                covariate: name.clone(),
                r2_outcome: r2y,
                r2_treatment: r2d,
                ratio_outcome: rv / r2y,
                ratio_treatment: rv / r2d,
            }
        })
        .collect();
    Ok(())
}

impl SensitivityReport {
    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "| Statistic | Value |\n|---|---|\n| t | {:.3} |\n| dof | {} |\n| q | {} |\n| f_q | {:.4} |\n| RV_q | {:.4} |\n",
            self.t_statistic, self.dof, self.q, self.f_q, self.robustness_value
        );
        if !self.benchmarks.is_empty() {
            out.push_str("\n| Benchmark | Partial R2 (outcome) | Partial R2 (treatment) | RV / R2 outcome | RV / R2 treatment |\n|---|---|---|---|---|\n");
            for b in &self.benchmarks {
                out.push_str(&format!(
                    "| {} | {:.5} | {:.5} | {:.2} | {:.2} |\n",
                    b.covariate, b.r2_outcome, b.r2_treatment, b.ratio_outcome, b.ratio_treatment
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Root of `x^2 / (1 - x) = f^2` on `[0, 1)` by bisection.
    fn bisect_rv(f: f64) -> f64 {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid * mid / (1.0 - mid) < f * f {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn zero_t_gives_zero() {
        assert_eq!(robustness_value(0.0, 50.0, 1.0).robustness_value, 0.0);
    }

    #[test]
    fn closed_form_matches_root_finding() {
        let r = robustness_value(4.0, 100.0, 1.0);
        assert!((r.f_q - 0.4).abs() < 1e-15);
        assert!((r.robustness_value - bisect_rv(0.4)).abs() < 1e-10);
        assert!((r.robustness_value - 0.327_921_561_087_422_8).abs() < 1e-10);
        for (t, dof, q) in [(2.5, 30.0, 1.0), (10.0, 5000.0, 0.5), (0.3, 8.0, 1.0)] {
            let r = robustness_value(t, dof, q);
            assert!((r.robustness_value - bisect_rv(q * t / f64::sqrt(dof))).abs() < 1e-10);
        }
    }

    #[test]
    fn rv_removes_the_estimate() {
        let r = robustness_value(4.0, 100.0, 1.0);
        let rv = r.robustness_value;
        assert!(adjusted_t(4.0, 100.0, rv, rv).abs() < 1e-9);
        assert!(adjusted_t(4.0, 100.0, 0.5 * rv, 0.5 * rv) > 0.0);
    }

    #[test]
    fn increasing_in_t() {
        let mut last = -1.0;
        for k in 0..200 {
            let rv = robustness_value(0.05 * k as f64, 120.0, 1.0).robustness_value;
            assert!(rv > last && (0.0..=1.0).contains(&rv));
            last = rv;
        }
    }

    #[test]
    fn benchmark_partial_r2_by_hand() {
        // single covariate, outcome exactly z + x with small noise
        let x: Vec<f64> = (0..30).map(|i| ((i * 13) % 30) as f64 / 10.0).collect();
        let z: Vec<f64> = (0..30).map(|i| (i % 2) as f64).collect();
        let y: Vec<f64> = (0..30).map(|i| z[i] + x[i] + if i % 3 == 0 { 0.1 } else { -0.05 }).collect();
        let mut r = robustness_value(4.0, 27.0, 1.0);
        benchmark(&mut r, &y, &z, &Design::new(30, 1, x.clone()), &["x".into()]).unwrap();
        let b = &r.benchmarks[0];
        assert!(b.r2_outcome > 0.9 && b.r2_outcome < 1.0);
        assert!(b.r2_treatment < 0.2);
        assert!((b.ratio_outcome - r.robustness_value / b.r2_outcome).abs() < 1e-15);
    }
}
