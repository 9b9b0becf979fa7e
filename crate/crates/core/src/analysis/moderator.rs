use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::estimators::normal_p_value;
use crate::forest::Design;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HetMethod {
    #[default]
    ClusterRobustOls,
    RandomInterceptMl,
}

/// Linear model of CATEs on moderators with student-level clustering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeratorFit {
    pub method: HetMethod,
    pub names: Vec<String>,
    pub beta0: f64,
    pub beta: Vec<f64>,
    /// Standard errors of `[beta0, beta..]`.
    pub std_errors: Vec<f64>,
    pub p_values: Vec<f64>,
    pub n_units: usize,
    pub cluster_count: usize,
    /// Between-student variance of the random intercept; `None` for OLS.
    pub student_variance: Option<f64>,
    pub residual_variance: f64,
}

impl ModeratorFit {
    pub fn coefficient(&self, name: &str) -> Option<(f64, f64, f64)> {
        let j = self.names.iter().position(|n| n == name)?;
        Some((self.beta[j], self.std_errors[j + 1], self.p_values[j + 1]))
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Term | Estimate | SE | p |\n|---|---|---|---|\n");
        let terms = std::iter::once("(intercept)").chain(self.names.iter().map(String::as_str));
        let values = std::iter::once(self.beta0).chain(self.beta.iter().copied());
        for ((name, b), (se, p)) in terms.zip(values).zip(self.std_errors.iter().zip(&self.p_values)) {
            out.push_str(&format!("| {name} | {b:.5} | {se:.5} | {p:.4} |\n"));
        }
        out
    }
}

/// Z-scores `v` with the population SD; a constant column maps to zeros.
pub fn zscore(v: &[f64]) -> Vec<f64> {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    v.iter().map(|x| if sd > 0.0 { (x - mean) / sd } else { 0.0 }).collect()
}

fn with_intercept(x: &Design) -> DMatrix<f64> {
    DMatrix::from_fn(x.n_rows, x.n_cols + 1, |i, j| if j == 0 { 1.0 } else { x.get(i, j - 1) })
}

fn check_rank(x: &DMatrix<f64>) -> Result<(), AnalysisError> {
    if x.nrows() < x.ncols() {
        return Err(AnalysisError::RankDeficientDesign(format!(
            "{} rows for {} coefficients",
            x.nrows(),
            x.ncols()
        )));
    }
    let sv = x.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min <= 1e-10 * max {
        return Err(AnalysisError::RankDeficientDesign(format!(
            "condition number {:.3e}",
            max / min
        )));
    }
    Ok(())
}

fn invert(m: DMatrix<f64>) -> Result<DMatrix<f64>, AnalysisError> {
    m.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| AnalysisError::RankDeficientDesign("normal matrix not positive definite".into()))
}

fn n_clusters(clusters: &[usize]) -> usize {
    let mut c = clusters.to_vec();
    c.sort_unstable();
    c.dedup();
    c.len()
}

/// OLS coefficients, CR1 covariance and residual variance (RSS / n).
/// `small_sample` applies `G/(G-1) * (n-1)/(n-k)`; otherwise the factor is 1.
pub fn cluster_robust_ols(
    y: &[f64],
    x: &DMatrix<f64>,
    clusters: &[usize],
    small_sample: bool,
) -> Result<(DVector<f64>, DMatrix<f64>, f64), AnalysisError> {
    check_rank(x)?;
    let (n, k) = x.shape();
    let yv = DVector::from_column_slice(y);
    let bread = invert(x.transpose() * x)?;
    let beta = &bread * (x.transpose() * &yv);
    let resid = &yv - x * &beta;

    let mut scores: std::collections::BTreeMap<usize, DVector<f64>> = Default::default();
    for i in 0..n {
        let s = scores.entry(clusters[i]).or_insert_with(|| DVector::zeros(k));
        *s += x.row(i).transpose() * resid[i];
    }
    let mut meat = DMatrix::zeros(k, k);
    for s in scores.values() {
        meat += s * s.transpose();
    }
    let g = scores.len() as f64;
    let factor = if small_sample && g > 1.0 && n > k {
        g / (g - 1.0) * (n as f64 - 1.0) / (n - k) as f64
    } else {
        1.0
    };
    let cov = &bread * meat * &bread * factor;
    let rss = resid.norm_squared();
    Ok((beta, cov, rss / n as f64))
}

struct Groups {
    members: Vec<Vec<usize>>,
}

impl Groups {
    fn new(clusters: &[usize]) -> Groups {
        let mut map: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, &c) in clusters.iter().enumerate() {
            map.entry(c).or_default().push(i);
        }
        Groups {
            members: map.into_values().collect(),
        }
    }
}

/// GLS fit at variance ratio `lambda`: coefficients, `(X' W X)^-1`, profiled
/// sigma^2 and profiled log-likelihood (up to a constant).
fn gls_at(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    groups: &Groups,
    lambda: f64,
) -> Result<(DVector<f64>, DMatrix<f64>, f64, f64), AnalysisError> {
    let (n, k) = x.shape();
    let mut xwx = DMatrix::zeros(k, k);
    let mut xwy = DVector::zeros(k);
    let mut logdet = 0.0;
    // W_g = I - w_g 11', w_g = lambda / (1 + n_g lambda)
    let mut weights = Vec::with_capacity(groups.members.len());
    for g in &groups.members {
        let ng = g.len() as f64;
        let w = lambda / (1.0 + ng * lambda);
        logdet += (1.0 + ng * lambda).ln();
        let mut sx = DVector::zeros(k);
        let mut sy = 0.0;
        for &i in g {
            let xi = x.row(i).transpose();
            xwx += &xi * xi.transpose();
            xwy += &xi * y[i];
            sx += xi;
            sy += y[i];
        }
        xwx -= &sx * sx.transpose() * w;
        xwy -= &sx * (sy * w);
        weights.push(w);
    }
    let inv = invert(xwx)?;
    let beta = &inv * xwy;
    let resid = y - x * &beta;
    let mut quad = 0.0;
    for (g, w) in groups.members.iter().zip(&weights) {
        let s: f64 = g.iter().map(|&i| resid[i]).sum();
        quad += g.iter().map(|&i| resid[i] * resid[i]).sum::<f64>() - w * s * s;
    }
    let sigma2 = quad / n as f64;
    let loglik = -0.5 * n as f64 * sigma2.ln() - 0.5 * logdet;
    Ok((beta, inv, sigma2, loglik))
}

/// Random-intercept model by profiled ML over `rho = lambda / (1 + lambda)`.
fn random_intercept(
    y: &[f64],
    x: &DMatrix<f64>,
    clusters: &[usize],
) -> Result<(DVector<f64>, DMatrix<f64>, f64, f64), AnalysisError> {
    check_rank(x)?;
    let yv = DVector::from_column_slice(y);
    let groups = Groups::new(clusters);
    let lambda = |rho: f64| rho / (1.0 - rho);
    let objective = |rho: f64| gls_at(&yv, x, &groups, lambda(rho)).map(|r| r.3);

    let (mut a, mut b) = (0.0, 1.0 - 1e-9);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (objective(c)?, objective(d)?);
    for _ in 0..200 {
        if b - a < 1e-12 {
            break;
        }
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = objective(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = objective(d)?;
        }
    }
    let mut rho = (a + b) / 2.0;
    if objective(0.0)? >= objective(rho)? {
        rho = 0.0;
    }
    let lam = lambda(rho);
    let (beta, inv, sigma2, _) = gls_at(&yv, x, &groups, lam)?;
    Ok((beta, inv * sigma2, sigma2, lam * sigma2))
}

/// Regresses `cates` on an intercept plus the columns of `moderators`.
pub fn fit_moderator_model(
    cates: &[f64],
    moderators: &Design,
    names: &[String],
    clusters: &[usize],
    method: HetMethod,
) -> Result<ModeratorFit, AnalysisError> {
    if cates.len() != moderators.n_rows || cates.len() != clusters.len() || names.len() != moderators.n_cols {
        return Err(AnalysisError::LengthMismatch(format!(
            "{} cates, {}x{} moderators, {} names, {} clusters",
            cates.len(),
            moderators.n_rows,
            moderators.n_cols,
            names.len(),
            clusters.len()
        )));
    }
    let x = with_intercept(moderators);
    let (beta, cov, residual_variance, student_variance) = match method {
        HetMethod::ClusterRobustOls => {
            let (b, c, s2) = cluster_robust_ols(cates, &x, clusters, true)?;
            (b, c, s2, None)
        }
        HetMethod::RandomInterceptMl => {
            let (b, c, s2, tau2) = random_intercept(cates, &x, clusters)?;
            (b, c, s2, Some(tau2))
        }
    };
    let std_errors: Vec<f64> = (0..beta.len()).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let p_values = beta
        .iter()
        .zip(&std_errors)
        .map(|(b, se)| normal_p_value(if *se > 0.0 { b / se } else { f64::NAN }))
        .collect();
    Ok(ModeratorFit {
        method,
        names: names.to_vec(),
        beta0: beta[0],
        beta: beta.iter().skip(1).copied().collect(),
        std_errors,
        p_values,
        n_units: cates.len(),
        cluster_count: n_clusters(clusters),
        student_variance,
        residual_variance,
    })
}
