use nalgebra::{DMatrix, DVector, RealField};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::{ModelError, Predictor};
use crate::dataset::Dataset;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LinearModel<T: Scalar> {
    pub intercept: T,
    pub coefficients: Vec<T>,
    pub feature_names: Vec<String>,
}

impl<T: Scalar> Predictor<T> for LinearModel<T> {
    fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    fn predict_row(&self, x: &[T]) -> T {
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(x)
                .map(|(c, v)| *c * *v)
                .sum::<T>()
    }
}

/// Ordinary least squares with an intercept. Columns are centred and the
/// minimum-norm solution is taken from an SVD, so collinear or
/// under-determined designs still get a unique answer.
pub fn fit_linear<T: Scalar + RealField>(ds: &Dataset<T>) -> Result<LinearModel<T>, ModelError> {
    let n = ds.n_rows();
    let p = ds.n_features();
    if n == 0 {
        return Err(ModelError::SingularDesign);
    }
    if ds.x.iter().flatten().chain(&ds.y).any(|v| !Float::is_finite(*v)) {
        return Err(ModelError::MissingValues);
    }
    let nt = T::of_usize(n);
    let xm: Vec<T> = (0..p)
        .map(|j| ds.x.iter().map(|r| r[j]).sum::<T>() / nt)
        .collect();
    let ym = ds.y.iter().copied().sum::<T>() / nt;
    if p == 0 {
        return Ok(LinearModel {
            intercept: ym,
            coefficients: Vec::new(),
            feature_names: Vec::new(),
        });
    }
    let a = DMatrix::from_fn(n, p, |i, j| ds.x[i][j] - xm[j]);
    let b = DVector::from_fn(n, |i, _| ds.y[i] - ym);
    let svd = a.svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(T::zero(), Float::max);
    let eps = smax * T::of_usize(n.max(p)) * <T as Float>::epsilon();
    let beta = svd.solve(&b, eps).map_err(|_| ModelError::SingularDesign)?;
    let coefficients: Vec<T> = beta.iter().copied().collect();
    let intercept = ym - coefficients.iter().zip(&xm).map(|(c, m)| *c * *m).sum::<T>();
    Ok(LinearModel {
        intercept,
        coefficients,
        feature_names: ds.names.clone(),
    })
}
