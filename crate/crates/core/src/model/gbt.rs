use serde::{Deserialize, Serialize};

use super::tree::{canonical_order, Grower, TreeNode, TreeParams};
use super::{check_fit_input, ModelError, Predictor, TreeEnsemble};
use crate::dataset::Dataset;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbtHyperParams {
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    /// L2 penalty on leaf weights; 0 gives plain first-order boosting.
    pub lambda: f64,
    pub min_split_gain: f64,
    pub min_samples_split: usize,
}

impl Default for GbtHyperParams {
    fn default() -> Self {
        Self {
            n_estimators: 50,
            learning_rate: 0.05,
            max_depth: 5,
            lambda: 1.0,
            min_split_gain: 0.0,
            min_samples_split: 2,
        }
    }
}

impl GbtHyperParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::BadParams(m));
        if self.n_estimators < 1 {
            return bad("n_estimators must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad(format!("learning_rate {} outside (0, 1]", self.learning_rate));
        }
        if self.max_depth < 1 {
            return bad("max_depth must be at least 1".into());
        }
        if !(self.lambda >= 0.0) || !(self.min_split_gain >= 0.0) {
            return bad("lambda and min_split_gain must be non-negative".into());
        }
        Ok(())
    }
}

/// `prediction = base_score + learning_rate * sum(tree outputs)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GbtModel<T: Scalar> {
    pub base_score: T,
    pub learning_rate: T,
    pub trees: Vec<TreeNode<T>>,
    pub feature_names: Vec<String>,
    pub params: GbtHyperParams,
}

impl<T: Scalar> GbtModel<T> {
    /// Prediction using only the first `k` trees.
    pub fn predict_staged(&self, x: &[T], k: usize) -> T {
        self.base_score
            + self.learning_rate
                * self.trees[..k.min(self.trees.len())]
                    .iter()
                    .map(|t| t.predict(x))
                    .sum::<T>()
    }
}

impl<T: Scalar> Predictor<T> for GbtModel<T> {
    fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    fn predict_row(&self, x: &[T]) -> T {
        self.predict_staged(x, self.trees.len())
    }
}

impl<T: Scalar> TreeEnsemble<T> for GbtModel<T> {
    fn offset(&self) -> T {
        self.base_score
    }

    fn components(&self) -> Vec<(T, &TreeNode<T>)> {
        self.trees.iter().map(|t| (self.learning_rate, t)).collect()
    }
}

/// Squared-error boosting: each round fits a tree to `g = pred - y`,
/// `h = 1` and adds it with shrinkage. Rows are put in a canonical order
/// first, so the result does not depend on input row order. Boosting here
/// is deterministic; `seed` is accepted for interface symmetry.
pub fn fit_gbt<T: Scalar>(
    ds: &Dataset<T>,
    params: &GbtHyperParams,
    _seed: u64,
) -> Result<GbtModel<T>, ModelError> {
    params.validate()?;
    check_fit_input(ds, 2)?;
    let order = canonical_order(&ds.x, &ds.y);
    let x: Vec<Vec<T>> = order.iter().map(|&i| ds.x[i].clone()).collect();
    let y: Vec<T> = order.iter().map(|&i| ds.y[i]).collect();
    let n = y.len();
    let base_score = y.iter().copied().sum::<T>() / T::of_usize(n);
    let eta = T::of(params.learning_rate);
    let mut pred = vec![base_score; n];
    let hess = vec![T::one(); n];
    let rows: Vec<usize> = (0..n).collect();
    let tp = TreeParams {
        max_depth: params.max_depth,
        lambda: params.lambda,
        min_split_gain: params.min_split_gain,
        min_samples_split: params.min_samples_split,
    };
    let mut trees = Vec::with_capacity(params.n_estimators);
    for _ in 0..params.n_estimators {
        let grad: Vec<T> = pred.iter().zip(&y).map(|(p, t)| *p - *t).collect();
        let tree = Grower {
            x: &x,
            grad: &grad,
            hess: &hess,
            params: tp,
        }
        .grow(&rows);
        for (p, xi) in pred.iter_mut().zip(&x) {
            *p = *p + eta * tree.predict(xi);
        }
        trees.push(tree);
    }
    Ok(GbtModel {
        base_score,
        learning_rate: eta,
        trees,
        feature_names: ds.names.clone(),
        params: *params,
    })
}
