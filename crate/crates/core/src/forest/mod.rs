//! Honest, cluster-subsampled random forests.
//!
//! Each tree draws a subsample of whole clusters (students), splits it by
//! cluster into a split half that shapes the tree and an estimation half
//! that fills the leaves, and is only ever used to predict units whose
//! cluster it never saw. Regression trees minimize squared error; causal
//! trees split on gradient pseudo-outcomes of the residual-on-residual
//! effect and estimate leaf effects as `sum(z~ y~) / sum(z~^2)`.

pub mod tree;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;
use tree::{GrowParams, Target, Tree};

#[derive(Debug, Error, PartialEq)]
pub enum ForestError {
    #[error("unit {unit} is in the subsample of every tree")]
    NoOobCoverage { unit: usize },
    #[error("treatment residuals have no variation")]
    InsufficientVariation,
    #[error("non-finite covariate at row {row}, column {col}")]
    NonFiniteCovariate { row: usize, col: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid forest config: {0}")]
    InvalidConfig(String),
}

/// Row-major covariate matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub n_rows: usize,
    pub n_cols: usize,
    data: Vec<f64>,
}

impl Design {
    pub fn new(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Design {
        assert_eq!(data.len(), n_rows * n_cols, "design shape");
        Design { n_rows, n_cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Design {
        let n_cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for r in rows {
            assert_eq!(r.len(), n_cols, "ragged design rows");
            data.extend_from_slice(r);
        }
        Design::new(rows.len(), n_cols, data)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    /// Rows in `idx` order.
    pub fn select(&self, idx: &[usize]) -> Design {
        let mut data = Vec::with_capacity(idx.len() * self.n_cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Design::new(idx.len(), self.n_cols, data)
    }

    /// Appends the columns of `other`.
    pub fn hstack(&self, other: &Design) -> Design {
        assert_eq!(self.n_rows, other.n_rows, "hstack rows");
        let mut data = Vec::with_capacity(self.n_rows * (self.n_cols + other.n_cols));
        for i in 0..self.n_rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Design::new(self.n_rows, self.n_cols + other.n_cols, data)
    }

    fn check_finite(&self) -> Result<(), ForestError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(k) => Err(ForestError::NonFiniteCovariate {
                row: k / self.n_cols,
                col: k % self.n_cols,
            }),
            None => Ok(()),
        }
    }
}

/// Dense cluster indices `0..G` in sorted order of the ids.
pub fn cluster_index<S: AsRef<str>>(ids: &[S]) -> Vec<usize> {
    let mut map: BTreeMap<&str, usize> = ids.iter().map(|s| (s.as_ref(), 0)).collect();
    for (k, v) in map.values_mut().enumerate() {
        *v = k;
    }
    ids.iter().map(|s| map[s.as_ref()]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub honesty: bool,
    pub honesty_fraction: f64,
    pub subsample_fraction: f64,
    /// Features tried per split; `None` means `ceil(sqrt(p))`.
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 500,
            honesty: true,
            honesty_fraction: 0.5,
            subsample_fraction: 0.5,
            mtry: None,
            min_leaf: 5,
            max_depth: None,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<(), ForestError> {
        let bad = |m: &str| Err(ForestError::InvalidConfig(m.into()));
        if self.n_trees < 1 {
            return bad("n_trees must be >= 1");
        }
        if !(self.honesty_fraction > 0.0 && self.honesty_fraction < 1.0) {
            return bad("honesty_fraction must be in (0, 1)");
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction < 1.0) {
            return bad("subsample_fraction must be in (0, 1)");
        }
        if self.min_leaf < 1 {
            return bad("min_leaf must be >= 1");
        }
        if self.mtry == Some(0) {
            return bad("mtry must be >= 1");
        }
        Ok(())
    }

    pub fn mtry_for(&self, p: usize) -> usize {
        self.mtry.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize).clamp(1, p.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForestKind {
    Regression,
    Causal,
}

/// Cluster bookkeeping of one tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeClusters {
    /// Sorted clusters that built the structure.
    pub split: Vec<usize>,
    /// Sorted clusters that filled the leaves; equal to `split` without honesty.
    pub estimation: Vec<usize>,
}

impl TreeClusters {
    pub fn contains(&self, cluster: usize) -> bool {
        self.split.binary_search(&cluster).is_ok() || self.estimation.binary_search(&cluster).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub kind: ForestKind,
    pub config: ForestConfig,
    pub n_features: usize,
    pub n_clusters: usize,
    pub trees: Vec<Tree>,
    pub clusters: Vec<TreeClusters>,
    pub warnings: Vec<String>,
}

pub type CausalForestModel = Forest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub values: Vec<f64>,
    /// Trees whose subsample excluded the unit's cluster.
    pub n_trees_used: Vec<usize>,
}

/// Per-unit CATE from a causal forest.
pub type CateEstimate = Prediction;

fn draw_clusters(cfg: &ForestConfig, n_clusters: usize, t: usize) -> TreeClusters {
    let mut rng = seeds::stream(cfg.seed, "forest-subsample", t as u64);
    let mut all: Vec<usize> = (0..n_clusters).collect();
    all.shuffle(&mut rng);
    let n_sub = ((n_clusters as f64 * cfg.subsample_fraction).round() as usize).clamp(1, n_clusters);
    let sub = &all[..n_sub];
    let (mut split, mut est) = if cfg.honesty {
        let n_split = ((n_sub as f64 * cfg.honesty_fraction).round() as usize).clamp(1, n_sub.max(2) - 1);
        (sub[..n_split.min(n_sub)].to_vec(), sub[n_split.min(n_sub)..].to_vec())
    } else {
        (sub.to_vec(), sub.to_vec())
    };
    split.sort_unstable();
    est.sort_unstable();
    TreeClusters {
        split,
        estimation: est,
    }
}

fn members(by_cluster: &[Vec<usize>], clusters: &[usize]) -> Vec<usize> {
    let mut v: Vec<usize> = clusters.iter().flat_map(|&c| by_cluster[c].iter().copied()).collect();
    v.sort_unstable();
    v
}

fn group_by_cluster(clusters: &[usize]) -> (usize, Vec<Vec<usize>>) {
    let g = clusters.iter().max().map_or(0, |m| m + 1);
    let mut by = vec![Vec::new(); g];
    for (i, &c) in clusters.iter().enumerate() {
        by[c].push(i);
    }
    (g, by)
}

fn fit(x: &Design, target: &Target, clusters: &[usize], cfg: &ForestConfig, kind: ForestKind) -> Forest {
    let (n_clusters, by_cluster) = group_by_cluster(clusters);
    let params = GrowParams {
        mtry: cfg.mtry_for(x.n_cols),
        min_leaf: cfg.min_leaf,
        max_depth: cfg.max_depth,
    };
    let root_default = target.estimate(&(0..x.n_rows).collect::<Vec<_>>()).unwrap_or(0.0);
    let built: Vec<(Tree, TreeClusters)> = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let tc = draw_clusters(cfg, n_clusters, t);
            let split = members(&by_cluster, &tc.split);
            let est = members(&by_cluster, &tc.estimation);
            let mut rng = seeds::stream(cfg.seed, "forest-tree", t as u64);
            let mut tree = tree::grow(x, target, split, est.clone(), &params, &mut rng);
            tree::set_values(&mut tree, x, target, &est, root_default);
            (tree, tc)
        })
        .collect();
    let (trees, tcs) = built.into_iter().unzip();
    Forest {
        kind,
        config: cfg.clone(),
        n_features: x.n_cols,
        n_clusters,
        trees,
        clusters: tcs,
        warnings: Vec::new(),
    }
}

fn check_lengths(x: &Design, cols: &[(&str, usize)]) -> Result<(), ForestError> {
    for (name, len) in cols {
        if *len != x.n_rows {
            return Err(ForestError::LengthMismatch(format!(
                "{name} has {len} entries for {} rows",
                x.n_rows
            )));
        }
    }
    Ok(())
}

pub fn train_regression_forest(
    x: &Design,
    y: &[f64],
    clusters: &[usize],
    cfg: &ForestConfig,
) -> Result<Forest, ForestError> {
    cfg.validate()?;
    check_lengths(x, &[("target", y.len()), ("clusters", clusters.len())])?;
    x.check_finite()?;
    let mut forest = fit(x, &Target::Regression { y }, clusters, cfg, ForestKind::Regression);
    if y.windows(2).all(|w| w[0] == w[1]) {
        forest
            .warnings
            .push("DegenerateTarget: constant target, every tree is a stump".into());
    }
    Ok(forest)
}

pub fn train_causal_forest(
    x: &Design,
    y_tilde: &[f64],
    z_tilde: &[f64],
    clusters: &[usize],
    cfg: &ForestConfig,
) -> Result<CausalForestModel, ForestError> {
    cfg.validate()?;
    check_lengths(
        x,
        &[
            ("y_tilde", y_tilde.len()),
            ("z_tilde", z_tilde.len()),
            ("clusters", clusters.len()),
        ],
    )?;
    x.check_finite()?;
    if z_tilde.iter().all(|&z| z == 0.0) {
        return Err(ForestError::InsufficientVariation);
    }
    Ok(fit(x, &Target::Causal { y_tilde, z_tilde }, clusters, cfg, ForestKind::Causal))
}

/// Averages, per unit, the trees whose subsample excluded its cluster.
/// Clusters outside the training range count as unseen by every tree.
pub fn oob_predict(forest: &Forest, x: &Design, clusters: &[usize]) -> Result<Prediction, ForestError> {
    check_lengths(x, &[("clusters", clusters.len())])?;
    let per: Vec<(f64, usize)> = (0..x.n_rows)
        .into_par_iter()
        .map(|i| {
            let row = x.row(i);
            let (mut sum, mut n) = (0.0, 0usize);
            for (tree, tc) in forest.trees.iter().zip(&forest.clusters) {
                if !tc.contains(clusters[i]) {
                    sum += tree.predict(row);
                    n += 1;
                }
            }
            (sum, n)
        })
        .collect();
    if let Some(unit) = per.iter().position(|&(_, n)| n == 0) {
        return Err(ForestError::NoOobCoverage { unit });
    }
    Ok(Prediction {
        values: per.iter().map(|&(s, n)| s / n as f64).collect(),
        n_trees_used: per.iter().map(|&(_, n)| n).collect(),
    })
}

pub fn predict_cate(model: &CausalForestModel, x: &Design, clusters: &[usize]) -> Result<CateEstimate, ForestError> {
    oob_predict(model, x, clusters)
}

/// Recomputes every leaf from the estimation half with new signals while
/// keeping the tree structures.
pub fn refit_leaves(forest: &Forest, x: &Design, a: &[f64], b: Option<&[f64]>, clusters: &[usize]) -> Forest {
    let target = match (forest.kind, b) {
        (ForestKind::Causal, Some(z)) => Target::Causal { y_tilde: a, z_tilde: z },
        (ForestKind::Regression, None) => Target::Regression { y: a },
        _ => panic!("refit_leaves: signals do not match the forest kind"),
    };
    let (_, by_cluster) = group_by_cluster(clusters);
    let root_default = target.estimate(&(0..x.n_rows).collect::<Vec<_>>()).unwrap_or(0.0);
    let mut out = forest.clone();
    for (tree, tc) in out.trees.iter_mut().zip(&forest.clusters) {
        let est: Vec<usize> = members(&by_cluster, &tc.estimation);
        tree::set_values(tree, x, &target, &est, root_default);
    }
    out
}

/// Out-of-bag `R^2` of a regression forest.
pub fn oob_r2(forest: &Forest, x: &Design, y: &[f64], clusters: &[usize]) -> Result<f64, ForestError> {
    let pred = oob_predict(forest, x, clusters)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let sse: f64 = y.iter().zip(&pred.values).map(|(v, p)| (v - p).powi(2)).sum();
    Ok(if sst > 0.0 { 1.0 - sse / sst } else { 0.0 })
}

/// Picks `min_leaf` and `mtry` from a small grid by out-of-bag `R^2`.
pub fn tune_regression_forest(
    x: &Design,
    y: &[f64],
    clusters: &[usize],
    cfg: &ForestConfig,
) -> Result<ForestConfig, ForestError> {
    let p = x.n_cols;
    let mtrys = [cfg.mtry_for(p), (p / 3).max(1)];
    let mut best: Option<(f64, ForestConfig)> = None;
    for min_leaf in [5, 20, 50] {
        for &mtry in &mtrys {
            let c = ForestConfig {
                min_leaf,
                mtry: Some(mtry),
                ..cfg.clone()
            };
            let f = train_regression_forest(x, y, clusters, &c)?;
            let r2 = oob_r2(&f, x, y, clusters)?;
            if best.as_ref().is_none_or(|(b, _)| r2 > *b) {
                best = Some((r2, c));
            }
        }
    }
    Ok(best.expect("non-empty grid").1)
}
