use rand::Rng;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::Design;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Index of the leaf reached by `row`.
    pub fn leaf_of(&self, row: &[f64]) -> usize {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => k = if row[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { .. } => return k,
            }
        }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        match &self.nodes[self.leaf_of(row)] {
            Node::Leaf { value } => *value,
            Node::Split { .. } => unreachable!("leaf_of returns a leaf"),
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

/// Per-unit signals a tree is fitted on.
pub enum Target<'a> {
    Regression { y: &'a [f64] },
    Causal { y_tilde: &'a [f64], z_tilde: &'a [f64] },
}

impl Target<'_> {
    fn treated(&self, i: usize) -> bool {
        match self {
            Target::Regression { .. } => true,
            Target::Causal { z_tilde, .. } => z_tilde[i] > 0.0,
        }
    }

    fn is_causal(&self) -> bool {
        matches!(self, Target::Causal { .. })
    }

    /// Honest node estimate from `units`, or `None` when undefined.
    pub fn estimate(&self, units: &[usize]) -> Option<f64> {
        if units.is_empty() {
            return None;
        }
        match self {
            Target::Regression { y } => {
                Some(units.iter().map(|&i| y[i]).sum::<f64>() / units.len() as f64)
            }
            Target::Causal { y_tilde, z_tilde } => {
                let (mut zy, mut zz) = (0.0, 0.0);
                for &i in units {
                    zy += z_tilde[i] * y_tilde[i];
                    zz += z_tilde[i] * z_tilde[i];
                }
                (zz > 0.0).then(|| zy / zz)
            }
        }
    }

    /// Values whose child sums drive the split score.
    fn pseudo(&self, units: &[usize]) -> Option<Vec<f64>> {
        match self {
            Target::Regression { y } => Some(units.iter().map(|&i| y[i]).collect()),
            Target::Causal { y_tilde, z_tilde } => {
                let (mut zy, mut zz) = (0.0, 0.0);
                for &i in units {
                    zy += z_tilde[i] * y_tilde[i];
                    zz += z_tilde[i] * z_tilde[i];
                }
                if zz <= 0.0 {
                    return None;
                }
                let tau = zy / zz;
                let mean_zz = zz / units.len() as f64;
                Some(
                    units
                        .iter()
                        .map(|&i| z_tilde[i] * (y_tilde[i] - z_tilde[i] * tau) / mean_zz)
                        .collect(),
                )
            }
        }
    }
}

pub struct GrowParams {
    pub mtry: usize,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
}

struct Counts {
    n: usize,
    treated: usize,
}

impl Counts {
    fn ok(&self, min_leaf: usize, causal: bool) -> bool {
        if causal {
            self.treated >= min_leaf && self.n - self.treated >= min_leaf
        } else {
            self.n >= min_leaf
        }
    }
}

struct Grower<'a, R: Rng> {
    x: &'a Design,
    target: &'a Target<'a>,
    params: &'a GrowParams,
    rng: &'a mut R,
    nodes: Vec<Node>,
}

/// Grows a tree whose splits use `split_units` outcomes only; `est_units`
/// enter through covariates and treatment counts. Leaf values are left at
/// zero until [`set_values`].
pub fn grow<R: Rng>(
    x: &Design,
    target: &Target,
    split_units: Vec<usize>,
    est_units: Vec<usize>,
    params: &GrowParams,
    rng: &mut R,
) -> Tree {
    let mut g = Grower {
        x,
        target,
        params,
        rng,
        nodes: Vec::new(),
    };
    g.node(split_units, est_units, 0);
    Tree { nodes: g.nodes }
}

impl<R: Rng> Grower<'_, R> {
    fn node(&mut self, split: Vec<usize>, est: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let at_max = self.params.max_depth.is_some_and(|d| depth >= d);
        if at_max || split.len() < 2 * self.params.min_leaf {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(&split, &est) else {
            return id;
        };
        let (sl, sr): (Vec<usize>, Vec<usize>) =
            split.into_iter().partition(|&i| self.x.get(i, feature) <= threshold);
        let (el, er): (Vec<usize>, Vec<usize>) =
            est.into_iter().partition(|&i| self.x.get(i, feature) <= threshold);
        let left = self.node(sl, el, depth + 1);
        let right = self.node(sr, er, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    fn best_split(&mut self, split: &[usize], est: &[usize]) -> Option<(usize, f64)> {
        let pseudo = self.target.pseudo(split)?;
        let causal = self.target.is_causal();
        let min_leaf = self.params.min_leaf;
        let p = self.x.n_cols;
        let mut features = sample(self.rng, p, self.params.mtry.min(p)).into_vec();
        features.sort_unstable();

        let total: f64 = pseudo.iter().sum();
        let n = split.len();
        let parent = total * total / n as f64;
        let n_treated = split.iter().filter(|&&i| self.target.treated(i)).count();
        let est_treated = est.iter().filter(|&&i| self.target.treated(i)).count();

        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<usize> = (0..n).collect();
        for &f in &features {
            let xs: Vec<f64> = split.iter().map(|&i| self.x.get(i, f)).collect();
            order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
            // est-half covariates and treatment flags, sorted by value
            let mut ex: Vec<(f64, bool)> =
                est.iter().map(|&i| (self.x.get(i, f), self.target.treated(i))).collect();
            ex.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut ex_treated = Vec::with_capacity(ex.len() + 1);
            ex_treated.push(0usize);
            for &(_, t) in &ex {
                ex_treated.push(ex_treated.last().unwrap() + t as usize);
            }

            let mut sum_left = 0.0;
            let mut treated_left = 0;
            for k in 0..n - 1 {
                let u = order[k];
                sum_left += pseudo[u];
                treated_left += self.target.treated(split[u]) as usize;
                let (lo, hi) = (xs[u], xs[order[k + 1]]);
                if lo == hi {
                    continue;
                }
                let left = Counts {
                    n: k + 1,
                    treated: treated_left,
                };
                let right = Counts {
                    n: n - k - 1,
                    treated: n_treated - treated_left,
                };
                if !left.ok(min_leaf, causal) || !right.ok(min_leaf, causal) {
                    continue;
                }
                let threshold = lo + (hi - lo) / 2.0;
                let ne = ex.partition_point(|e| e.0 <= threshold);
                let eleft = Counts {
                    n: ne,
                    treated: ex_treated[ne],
                };
                let eright = Counts {
                    n: est.len() - ne,
                    treated: est_treated - ex_treated[ne],
                };
                if !eleft.ok(min_leaf, causal) || !eright.ok(min_leaf, causal) {
                    continue;
                }
                let sum_right = total - sum_left;
                let score = sum_left * sum_left / left.n as f64 + sum_right * sum_right / right.n as f64;
                if best.is_none_or(|(b, _, _)| score > b) {
                    best = Some((score, f, threshold));
                }
            }
        }
        let (score, f, threshold) = best?;
        let gain = score - parent;
        (gain > 1e-12 * (1.0 + parent.abs())).then_some((f, threshold))
    }
}

/// Sets every node estimate top-down from `est_units`; nodes without a
/// defined estimate inherit their parent's. The root falls back to
/// `root_default` if `est_units` cannot define it.
pub fn set_values(tree: &mut Tree, x: &Design, target: &Target, est_units: &[usize], root_default: f64) {
    fn walk(
        tree: &mut Tree,
        k: usize,
        x: &Design,
        target: &Target,
        units: Vec<usize>,
        inherited: f64,
    ) {
        let value = target.estimate(&units).unwrap_or(inherited);
        match tree.nodes[k].clone() {
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                let (l, r): (Vec<usize>, Vec<usize>) =
                    units.into_iter().partition(|&i| x.get(i, feature) <= threshold);
                walk(tree, left, x, target, l, value);
                walk(tree, right, x, target, r, value);
            }
            Node::Leaf { .. } => tree.nodes[k] = Node::Leaf { value },
        }
    }
    walk(tree, 0, x, target, est_units.to_vec(), root_default);
}
