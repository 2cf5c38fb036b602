use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{canonical_order, Grower, TreeNode, TreeParams};
use super::{check_fit_input, ModelError, Predictor, TreeEnsemble};
use crate::dataset::Dataset;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    /// Draw a bootstrap sample per tree; off, every tree sees all rows.
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_samples_split: 2,
            bootstrap: true,
        }
    }
}

/// Mean of independently grown variance-reduction trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ForestModel<T: Scalar> {
    pub trees: Vec<TreeNode<T>>,
    pub feature_names: Vec<String>,
    pub params: ForestParams,
    /// Out-of-bag RMSE over rows left out by at least one tree.
    pub oob_rmse: Option<f64>,
}

impl<T: Scalar> Predictor<T> for ForestModel<T> {
    fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    fn predict_row(&self, x: &[T]) -> T {
        if self.trees.is_empty() {
            return T::zero();
        }
        self.trees.iter().map(|t| t.predict(x)).sum::<T>() / T::of_usize(self.trees.len())
    }
}

impl<T: Scalar> TreeEnsemble<T> for ForestModel<T> {
    fn offset(&self) -> T {
        T::zero()
    }

    fn components(&self) -> Vec<(T, &TreeNode<T>)> {
        let w = T::one() / T::of_usize(self.trees.len().max(1));
        self.trees.iter().map(|t| (w, t)).collect()
    }
}

/// With `g = -y`, `h = 1` and no penalty, the shared learner's gain is half
/// the squared-error reduction and its leaf weight is the leaf mean.
pub fn fit_forest<T: Scalar>(
    ds: &Dataset<T>,
    params: &ForestParams,
    seed: u64,
) -> Result<ForestModel<T>, ModelError> {
    if params.n_trees < 1 || params.max_depth == Some(0) {
        return Err(ModelError::BadParams(format!("{params:?}")));
    }
    check_fit_input(ds, 2)?;
    let order = canonical_order(&ds.x, &ds.y);
    let x: Vec<Vec<T>> = order.iter().map(|&i| ds.x[i].clone()).collect();
    let y: Vec<T> = order.iter().map(|&i| ds.y[i]).collect();
    let n = y.len();
    let grad: Vec<T> = y.iter().map(|v| -*v).collect();
    let hess = vec![T::one(); n];
    let tp = TreeParams {
        max_depth: params.max_depth.unwrap_or(usize::MAX),
        lambda: 0.0,
        min_split_gain: 0.0,
        min_samples_split: params.min_samples_split,
    };
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..params.n_trees).map(|_| master.next_u64()).collect();
    let grown: Vec<(TreeNode<T>, Vec<bool>)> = seeds
        .par_iter()
        .map(|&s| {
            let rows: Vec<usize> = if params.bootstrap {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut in_bag = vec![false; n];
            for &i in &rows {
                in_bag[i] = true;
            }
            let tree = Grower {
                x: &x,
                grad: &grad,
                hess: &hess,
                params: tp,
            }
            .grow(&rows);
            (tree, in_bag)
        })
        .collect();

    let mut sse = 0.0;
    let mut covered = 0usize;
    for i in 0..n {
        let outs: Vec<f64> = grown
            .iter()
            .filter(|(_, bag)| !bag[i])
            .map(|(t, _)| t.predict(&x[i]).as_f64())
            .collect();
        if !outs.is_empty() {
            let p = outs.iter().sum::<f64>() / outs.len() as f64;
            sse += (p - y[i].as_f64()).powi(2);
            covered += 1;
        }
    }
    Ok(ForestModel {
        trees: grown.into_iter().map(|(t, _)| t).collect(),
        feature_names: ds.names.clone(),
        params: *params,
        oob_rmse: (covered > 0).then(|| (sse / covered as f64).sqrt()),
    })
}
