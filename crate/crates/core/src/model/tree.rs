//! Exact greedy second-order regression tree.

use serde::{Deserialize, Serialize};

use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", rename_all = "snake_case")]
pub enum TreeNode<T: Scalar> {
    Leaf {
        weight: T,
    },
    Split {
        feature: usize,
        threshold: T,
        /// Side taken by missing (`NaN`) values.
        default_left: bool,
        left: Box<TreeNode<T>>,
        right: Box<TreeNode<T>>,
    },
}

impl<T: Scalar> TreeNode<T> {
    /// `x[feature] < threshold` goes left.
    pub fn predict(&self, x: &[T]) -> T {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { weight } => return *weight,
                TreeNode::Split {
                    feature,
                    threshold,
                    default_left,
                    left,
                    right,
                } => {
                    let v = x[*feature];
                    let go_left = if v.is_nan() { *default_left } else { v < *threshold };
                    node = if go_left { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }

    /// Features used by any split, ascending and deduplicated.
    pub fn used_features(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect_features(&mut out);
        out.sort_unstable();
        out.dedup();
        out
    }

    fn collect_features(&self, out: &mut Vec<usize>) {
        if let TreeNode::Split {
            feature, left, right, ..
        } = self
        {
            out.push(*feature);
            left.collect_features(out);
            right.collect_features(out);
        }
    }

    pub fn leaf_weights(&self) -> Vec<T> {
        match self {
            TreeNode::Leaf { weight } => vec![*weight],
            TreeNode::Split { left, right, .. } => {
                let mut v = left.leaf_weights();
                v.extend(right.leaf_weights());
                v
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    pub max_depth: usize,
    pub lambda: f64,
    pub min_split_gain: f64,
    pub min_samples_split: usize,
}

/// Gradient/hessian sums of one side of a split.
#[derive(Clone, Copy)]
struct Sums<T> {
    g: T,
    h: T,
}

fn score<T: Scalar>(s: Sums<T>, lambda: T) -> T {
    let d = s.h + lambda;
    if d > T::zero() {
        s.g * s.g / d
    } else {
        T::zero()
    }
}

/// Split gain `1/2 [G_L^2/(H_L+l) + G_R^2/(H_R+l) - G^2/(H+l)]`.
pub fn split_gain<T: Scalar>(gl: T, hl: T, gr: T, hr: T, lambda: T) -> T {
    let half = T::of(0.5);
    half * (score(Sums { g: gl, h: hl }, lambda) + score(Sums { g: gr, h: hr }, lambda)
        - score(Sums { g: gl + gr, h: hl + hr }, lambda))
}

/// Optimal leaf weight `-G/(H+l)`.
pub fn leaf_weight<T: Scalar>(g: T, h: T, lambda: T) -> T {
    let d = h + lambda;
    if d > T::zero() {
        -g / d
    } else {
        T::zero()
    }
}

struct Candidate<T> {
    gain: T,
    feature: usize,
    threshold: T,
    default_left: bool,
}

pub(crate) struct Grower<'a, T: Scalar> {
    pub x: &'a [Vec<T>],
    pub grad: &'a [T],
    pub hess: &'a [T],
    pub params: TreeParams,
}

impl<T: Scalar> Grower<'_, T> {
    /// Grows a tree over `rows`; indices may repeat (bootstrap samples).
    pub fn grow(&self, rows: &[usize]) -> TreeNode<T> {
        self.node(rows, 0)
    }

    fn sums(&self, rows: &[usize]) -> Sums<T> {
        rows.iter().fold(
            Sums {
                g: T::zero(),
                h: T::zero(),
            },
            |s, &i| Sums {
                g: s.g + self.grad[i],
                h: s.h + self.hess[i],
            },
        )
    }

    fn node(&self, rows: &[usize], depth: usize) -> TreeNode<T> {
        let lambda = T::of(self.params.lambda);
        let total = self.sums(rows);
        let leaf = || TreeNode::Leaf {
            weight: leaf_weight(total.g, total.h, lambda),
        };
        if depth >= self.params.max_depth || rows.len() < self.params.min_samples_split.max(2) {
            return leaf();
        }
        let Some(best) = self.best_split(rows, total, lambda) else {
            return leaf();
        };
        if !(best.gain > T::of(self.params.min_split_gain)) {
            return leaf();
        }
        let (mut l, mut r) = (Vec::new(), Vec::new());
        for &i in rows {
            let v = self.x[i][best.feature];
            let go_left = if v.is_nan() { best.default_left } else { v < best.threshold };
            if go_left { l.push(i) } else { r.push(i) }
        }
        debug_assert!(!l.is_empty() && !r.is_empty());
        TreeNode::Split {
            feature: best.feature,
            threshold: best.threshold,
            default_left: best.default_left,
            left: Box::new(self.node(&l, depth + 1)),
            right: Box::new(self.node(&r, depth + 1)),
        }
    }

    /// Best split over all features and midpoints. Strict improvement is
    /// required to replace the incumbent, so ties keep the lowest feature
    /// index and then the lowest threshold.
    fn best_split(&self, rows: &[usize], total: Sums<T>, lambda: T) -> Option<Candidate<T>> {
        let n_features = self.x.first().map_or(0, |r| r.len());
        let mut best: Option<Candidate<T>> = None;
        let mut vals: Vec<(T, usize)> = Vec::with_capacity(rows.len());
        for f in 0..n_features {
            vals.clear();
            let mut miss = Sums {
                g: T::zero(),
                h: T::zero(),
            };
            for &i in rows {
                let v = self.x[i][f];
                if v.is_nan() {
                    miss.g = miss.g + self.grad[i];
                    miss.h = miss.h + self.hess[i];
                } else {
                    vals.push((v, i));
                }
            }
            // Stable sort keeps the canonical row order among equal values.
            vals.sort_by(|a, b| a.0.cmp_total(&b.0));
            let has_missing = vals.len() < rows.len();
            let mut left = Sums {
                g: T::zero(),
                h: T::zero(),
            };
            for k in 0..vals.len().saturating_sub(1) {
                let (v, i) = vals[k];
                left.g = left.g + self.grad[i];
                left.h = left.h + self.hess[i];
                let next = vals[k + 1].0;
                if next <= v {
                    continue;
                }
                let right_finite = Sums {
                    g: total.g - miss.g - left.g,
                    h: total.h - miss.h - left.h,
                };
                // Missing values go right, then left; keep the better.
                let gain_r = split_gain(left.g, left.h, right_finite.g + miss.g, right_finite.h + miss.h, lambda);
                let (gain, default_left) = if has_missing {
                    let gain_l = split_gain(left.g + miss.g, left.h + miss.h, right_finite.g, right_finite.h, lambda);
                    if gain_l > gain_r { (gain_l, true) } else { (gain_r, false) }
                } else {
                    (gain_r, true)
                };
                let mut threshold = (v + next) * T::of(0.5);
                if threshold <= v {
                    threshold = next;
                }
                if best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(Candidate {
                        gain,
                        feature: f,
                        threshold,
                        default_left,
                    });
                }
            }
        }
        best
    }
}

/// Row permutation that sorts rows lexicographically by features then
/// target, making fits independent of input row order.
pub(crate) fn canonical_order<T: Scalar>(x: &[Vec<T>], y: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..y.len()).collect();
    idx.sort_by(|&a, &b| {
        x[a].iter()
            .zip(&x[b])
            .map(|(p, q)| p.cmp_total(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(y[a].cmp_total(&y[b]))
    });
    idx
}
