//! Regressors: boosted trees (second- or first-order), bagged forests and
//! least squares, plus persistence and cross-validated grid search.

pub mod forest;
pub mod gbt;
pub mod grid;
pub mod linear;
pub mod tree;

pub use forest::{fit_forest, ForestModel, ForestParams};
pub use gbt::{fit_gbt, GbtHyperParams, GbtModel};
pub use grid::{grid_search, CvRow, GridOutcome, ParamGrid};
pub use linear::{fit_linear, LinearModel};
pub use tree::TreeNode;

use nalgebra::RealField;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("bad hyperparameters: {0}")]
    BadParams(String),
    #[error("feature schema mismatch: model expects {expected:?}, table has {found:?}")]
    SchemaMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("design matrix is empty")]
    SingularDesign,
    #[error("linear fit requires finite values everywhere")]
    MissingValues,
    #[error("need at least {needed} rows, got {rows}")]
    TooFewRows { rows: usize, needed: usize },
    #[error("empty hyperparameter grid")]
    GridEmpty,
    #[error("bad fold count k={k} for {rows} rows")]
    BadK { k: usize, rows: usize },
    #[error("unsupported model document version {0}")]
    UnsupportedVersion(u32),
    #[error("model json: {0}")]
    Json(String),
}

/// Anything that maps a feature row to an estimate.
pub trait Predictor<T: Scalar>: Sync {
    fn feature_names(&self) -> &[String];

    fn predict_row(&self, x: &[T]) -> T;

    /// Batch prediction; the table's columns must match the fit-time schema.
    fn predict(&self, ds: &Dataset<T>) -> Result<Vec<T>, ModelError> {
        if ds.names != self.feature_names() {
            return Err(ModelError::SchemaMismatch {
                expected: self.feature_names().to_vec(),
                found: ds.names.clone(),
            });
        }
        Ok(ds.x.iter().map(|r| self.predict_row(r)).collect())
    }
}

/// A weighted sum of trees plus a constant.
pub trait TreeEnsemble<T: Scalar> {
    fn offset(&self) -> T;
    fn components(&self) -> Vec<(T, &TreeNode<T>)>;
}

pub(crate) fn check_fit_input<T: Scalar>(ds: &Dataset<T>, min_rows: usize) -> Result<(), ModelError> {
    if ds.n_rows() < min_rows {
        return Err(ModelError::TooFewRows {
            rows: ds.n_rows(),
            needed: min_rows,
        });
    }
    if ds.x.iter().any(|r| r.len() != ds.n_features()) {
        return Err(ModelError::BadParams("ragged feature rows".into()));
    }
    Ok(())
}

/// What to fit; one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Gbt(GbtHyperParams),
    Forest(ForestParams),
    Linear,
}

impl ModelSpec {
    pub fn fit<T: Scalar + RealField>(&self, ds: &Dataset<T>, seed: u64) -> Result<Model<T>, ModelError> {
        Ok(match self {
            ModelSpec::Gbt(p) => Model::Gbt(fit_gbt(ds, p, seed)?),
            ModelSpec::Forest(p) => Model::Forest(fit_forest(ds, p, seed)?),
            ModelSpec::Linear => Model::Linear(fit_linear(ds)?),
        })
    }

    pub fn n_trees(&self) -> usize {
        match self {
            ModelSpec::Gbt(p) => p.n_estimators,
            ModelSpec::Forest(p) => p.n_trees,
            ModelSpec::Linear => 0,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            ModelSpec::Gbt(p) => p.max_depth,
            ModelSpec::Forest(p) => p.max_depth.unwrap_or(usize::MAX),
            ModelSpec::Linear => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", tag = "kind", rename_all = "snake_case")]
pub enum Model<T: Scalar> {
    Gbt(GbtModel<T>),
    Forest(ForestModel<T>),
    Linear(LinearModel<T>),
}

impl<T: Scalar> Model<T> {
    pub fn as_ensemble(&self) -> Option<&dyn TreeEnsemble<T>> {
        match self {
            Model::Gbt(m) => Some(m),
            Model::Forest(m) => Some(m),
            Model::Linear(_) => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Model::Gbt(m) if m.params.lambda == 0.0 => "gb",
            Model::Gbt(_) => "xgb",
            Model::Forest(_) => "rf",
            Model::Linear(_) => "lr",
        }
    }
}

impl<T: Scalar> Predictor<T> for Model<T> {
    fn feature_names(&self) -> &[String] {
        match self {
            Model::Gbt(m) => m.feature_names(),
            Model::Forest(m) => m.feature_names(),
            Model::Linear(m) => m.feature_names(),
        }
    }

    fn predict_row(&self, x: &[T]) -> T {
        match self {
            Model::Gbt(m) => m.predict_row(x),
            Model::Forest(m) => m.predict_row(x),
            Model::Linear(m) => m.predict_row(x),
        }
    }
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// On-disk model: versioned, with the provenance stamp of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub config_hash: String,
    pub model: Model<f64>,
}

impl ModelDocument {
    pub fn new(model: Model<f64>, seed: u64, config_hash: String) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            seed,
            config_hash,
            model,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| ModelError::Json(e.to_string()))?;
        let version = v.get("format_version").and_then(|x| x.as_u64()).unwrap_or(0) as u32;
        if version != MODEL_FORMAT_VERSION {
            return Err(ModelError::UnsupportedVersion(version));
        }
        serde_json::from_value(v).map_err(|e| ModelError::Json(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table() -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x: Vec<Vec<f64>> = (0..100).map(|_| (0..3).map(|_| rng.random_range(0.0..5.0)).collect()).collect();
        let y = x.iter().map(|r| r[0] * r[1] - r[2]).collect();
        Dataset::from_xy(vec!["a".into(), "b".into(), "c".into()], x, y)
    }

    #[test]
    fn batch_equals_single_row() {
        let ds = table();
        for spec in [
            ModelSpec::Gbt(GbtHyperParams::default()),
            ModelSpec::Forest(ForestParams { n_trees: 10, ..Default::default() }),
            ModelSpec::Linear,
        ] {
            let m = spec.fit(&ds, 3).unwrap();
            let batch = m.predict(&ds).unwrap();
            for (x, p) in ds.x.iter().zip(&batch) {
                assert_eq!(m.predict_row(x).to_bits(), p.to_bits());
            }
        }
    }

    #[test]
    fn schema_mismatch() {
        let ds = table();
        let m = ModelSpec::Linear.fit(&ds, 0).unwrap();
        let other = ds.select(&["b".to_string(), "a".to_string(), "c".to_string()]).unwrap();
        assert!(matches!(m.predict(&other), Err(ModelError::SchemaMismatch { .. })));
    }

    #[test]
    fn document_round_trip() {
        let ds = table();
        let m = ModelSpec::Gbt(GbtHyperParams { n_estimators: 5, ..Default::default() }).fit(&ds, 0).unwrap();
        let doc = ModelDocument::new(m, 7, "abc".into());
        let back = ModelDocument::from_json(&doc.to_json()).unwrap();
        assert_eq!(back, doc);
        let mut v: serde_json::Value = serde_json::from_str(&doc.to_json()).unwrap();
        v["format_version"] = 99.into();
        assert_eq!(
            ModelDocument::from_json(&v.to_string()),
            Err(ModelError::UnsupportedVersion(99))
        );
    }
}
