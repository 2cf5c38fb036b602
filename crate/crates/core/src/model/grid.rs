use nalgebra::RealField;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ForestParams, GbtHyperParams, Model, ModelError, ModelSpec, Predictor};
use crate::dataset::Dataset;
use crate::eval::{complement, kfold_indices, metrics, EvalError};
use crate::Scalar;

fn unit_lambda() -> Vec<f64> {
    vec![1.0]
}

/// Cartesian hyperparameter grid for one model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ParamGrid {
    /// Second-order boosting with leaf penalty.
    Xgb {
        n_estimators: Vec<usize>,
        learning_rate: Vec<f64>,
        max_depth: Vec<usize>,
        #[serde(default = "unit_lambda")]
        lambda: Vec<f64>,
    },
    /// First-order boosting, no leaf penalty.
    Gb {
        n_estimators: Vec<usize>,
        learning_rate: Vec<f64>,
        max_depth: Vec<usize>,
    },
    Rf {
        n_estimators: Vec<usize>,
        max_depth: Vec<Option<usize>>,
        min_samples_split: Vec<usize>,
    },
    Lr,
}

impl ParamGrid {
    pub fn xgb_default() -> Self {
        ParamGrid::Xgb {
            n_estimators: vec![20, 50, 100, 200, 250],
            learning_rate: vec![0.01, 0.05, 0.1, 0.2],
            max_depth: vec![3, 5, 6, 7],
            lambda: unit_lambda(),
        }
    }

    pub fn gb_default() -> Self {
        ParamGrid::Gb {
            n_estimators: vec![20, 50, 100, 200, 250],
            learning_rate: vec![0.01, 0.05, 0.1, 0.2],
            max_depth: vec![3, 5, 6, 7],
        }
    }

    pub fn rf_default() -> Self {
        ParamGrid::Rf {
            n_estimators: vec![30, 50, 100, 200],
            max_depth: vec![None, Some(5), Some(6), Some(7), Some(9), Some(10)],
            min_samples_split: vec![2, 5],
        }
    }

    /// Every combination, first-listed parameter varying slowest.
    pub fn expand(&self) -> Vec<ModelSpec> {
        let boost = |n: &[usize], lr: &[f64], d: &[usize], lam: &[f64]| {
            let mut out = Vec::new();
            for &n_estimators in n {
                for &learning_rate in lr {
                    for &max_depth in d {
                        for &lambda in lam {
                            out.push(ModelSpec::Gbt(GbtHyperParams {
                                n_estimators,
                                learning_rate,
                                max_depth,
                                lambda,
                                ..Default::default()
                            }));
                        }
                    }
                }
            }
            out
        };
        match self {
            ParamGrid::Xgb {
                n_estimators,
                learning_rate,
                max_depth,
                lambda,
            } => boost(n_estimators, learning_rate, max_depth, lambda),
            ParamGrid::Gb {
                n_estimators,
                learning_rate,
                max_depth,
            } => boost(n_estimators, learning_rate, max_depth, &[0.0]),
            ParamGrid::Rf {
                n_estimators,
                max_depth,
                min_samples_split,
            } => {
                let mut out = Vec::new();
                for &min_samples_split in min_samples_split {
                    for &n_trees in n_estimators {
                        for &d in max_depth {
                            out.push(ModelSpec::Forest(ForestParams {
                                n_trees,
                                max_depth: d,
                                min_samples_split,
                                bootstrap: true,
                            }));
                        }
                    }
                }
                out
            }
            ParamGrid::Lr => vec![ModelSpec::Linear],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub index: usize,
    pub spec: ModelSpec,
    pub fold_rmse: Vec<f64>,
    pub mean_rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome<T: Scalar> {
    pub best_index: usize,
    pub best: ModelSpec,
    pub cv_table: Vec<CvRow>,
    /// Best configuration refit on the whole table.
    pub model: Model<T>,
}

fn eval_err(e: EvalError) -> ModelError {
    match e {
        EvalError::Model(m) => m,
        EvalError::BadK { k, rows } => ModelError::BadK { k, rows },
        other => ModelError::BadParams(other.to_string()),
    }
}

/// Exhaustive k-fold search minimizing mean validation RMSE. Ties go to
/// fewer trees, then shallower trees, then grid order. Configurations are
/// scored in parallel; results do not depend on scheduling.
pub fn grid_search<T: Scalar + RealField>(
    ds: &Dataset<T>,
    specs: &[ModelSpec],
    k: usize,
    seed: u64,
) -> Result<GridOutcome<T>, ModelError> {
    if specs.is_empty() {
        return Err(ModelError::GridEmpty);
    }
    let folds = kfold_indices(ds.n_rows(), k, seed).map_err(eval_err)?;
    let parts: Vec<(Dataset<T>, Dataset<T>)> = (0..k)
        .map(|j| (ds.subset(&complement(&folds, j)), ds.subset(&folds[j])))
        .collect();
    let cv_table: Vec<CvRow> = specs
        .par_iter()
        .enumerate()
        .map(|(index, spec)| {
            let fold_rmse = parts
                .iter()
                .map(|(train, val)| {
                    let m = spec.fit(train, seed)?;
                    let pred = m.predict(val)?;
                    let mse = pred
                        .iter()
                        .zip(&val.y)
                        .map(|(p, y)| (*p - *y).as_f64().powi(2))
                        .sum::<f64>()
                        / val.n_rows() as f64;
                    Ok(mse.sqrt())
                })
                .collect::<Result<Vec<f64>, ModelError>>()?;
            let mean_rmse = fold_rmse.iter().sum::<f64>() / k as f64;
            Ok(CvRow {
                index,
                spec: *spec,
                fold_rmse,
                mean_rmse,
            })
        })
        .collect::<Result<_, ModelError>>()?;
    let best = cv_table
        .iter()
        .min_by(|a, b| {
            a.mean_rmse
                .total_cmp(&b.mean_rmse)
                .then(a.spec.n_trees().cmp(&b.spec.n_trees()))
                .then(a.spec.depth().cmp(&b.spec.depth()))
                .then(a.index.cmp(&b.index))
        })
        .expect("non-empty grid");
    let model = best.spec.fit(ds, seed)?;
    Ok(GridOutcome {
        best_index: best.index,
        best: best.spec,
        cv_table: cv_table.clone(),
        model,
    })
}

/// Convenience for reporting: the held-out metrics of a fitted model.
pub fn holdout_rmse<T: Scalar>(model: &Model<T>, ds: &Dataset<T>) -> Result<f64, ModelError> {
    let pred = model.predict(ds)?;
    metrics(&pred, &ds.y).map(|r| r.rmse).map_err(eval_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(n: usize, seed: u64) -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let y = x.iter().map(|r| 2.0 * r[0] + r[1] + rng.random_range(-0.1..0.1)).collect();
        Dataset::from_xy(vec!["a".into(), "b".into(), "c".into()], x, y)
    }

    #[test]
    fn default_grid_sizes() {
        assert_eq!(ParamGrid::xgb_default().expand().len(), 80);
        assert_eq!(ParamGrid::gb_default().expand().len(), 80);
        assert_eq!(ParamGrid::rf_default().expand().len(), 48);
        assert_eq!(ParamGrid::Lr.expand(), vec![ModelSpec::Linear]);
    }

    #[test]
    fn grid_json_round_trip() {
        let g = ParamGrid::rf_default();
        let text = serde_json::to_string(&g).unwrap();
        assert!(text.contains("null"));
        assert_eq!(serde_json::from_str::<ParamGrid>(&text).unwrap(), g);
        let xgb: ParamGrid =
            serde_json::from_str(r#"{"model":"xgb","n_estimators":[5],"learning_rate":[0.1],"max_depth":[2]}"#).unwrap();
        assert_eq!(xgb.expand().len(), 1);
    }

    #[test]
    fn singleton_grid() {
        let ds = table(40, 1);
        let spec = ModelSpec::Gbt(GbtHyperParams { n_estimators: 5, ..Default::default() });
        let out = grid_search(&ds, &[spec], 4, 0).unwrap();
        assert_eq!(out.best, spec);
        assert_eq!(out.cv_table.len(), 1);
        assert_eq!(out.cv_table[0].fold_rmse.len(), 4);
    }

    #[test]
    fn ties_prefer_smaller_models() {
        // Constant target: every configuration scores exactly zero.
        let mut ds = table(30, 2);
        ds.y = vec![1.0; 30];
        let specs = ParamGrid::Xgb {
            n_estimators: vec![10, 5],
            learning_rate: vec![0.1],
            max_depth: vec![4, 2],
            lambda: vec![1.0],
        }
        .expand();
        let out = grid_search(&ds, &specs, 3, 0).unwrap();
        assert_eq!(out.best.n_trees(), 5);
        assert_eq!(out.best.depth(), 2);
    }

    #[test]
    fn errors() {
        let ds = table(10, 3);
        assert_eq!(grid_search(&ds, &[], 3, 0).unwrap_err(), ModelError::GridEmpty);
        assert!(matches!(
            grid_search(&ds, &[ModelSpec::Linear], 11, 0),
            Err(ModelError::BadK { .. })
        ));
    }
}
