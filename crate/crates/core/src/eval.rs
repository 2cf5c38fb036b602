//! Train/test splitting, cross-validation, error metrics and paired model
//! comparison.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::model::{ModelError, Predictor};
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("need at least {needed} rows, got {rows}")]
    TooFewRows { rows: usize, needed: usize },
    #[error("dataset {0:?} spans fewer than two windows")]
    DatasetTooShort(String),
    #[error("bad fold count k={k} for {rows} rows")]
    BadK { k: usize, rows: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("bad split spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Stratified,
    Windowed,
    Kfold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub train_fraction: f64,
    /// Window length in seconds for the windowed split.
    pub window_length: i64,
    pub k: usize,
    pub strata_bins: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            kind: SplitKind::Stratified,
            train_fraction: 0.75,
            window_length: 900,
            k: 5,
            strata_bins: 10,
            seed: 0,
        }
    }
}

impl SplitSpec {
    fn validate(&self) -> Result<(), EvalError> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(EvalError::BadSpec(format!("train_fraction {}", self.train_fraction)));
        }
        if self.window_length <= 0 || self.strata_bins == 0 {
            return Err(EvalError::BadSpec("window_length and strata_bins must be positive".into()));
        }
        Ok(())
    }
}

/// Row indices on each side, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Rows ranked by target and cut into `strata_bins` equal-count strata;
/// each stratum is shuffled and its first `round(fraction * size)` rows
/// go to train.
pub fn stratified_split<T: Scalar>(y: &[T], spec: &SplitSpec) -> Result<Split, EvalError> {
    spec.validate()?;
    let n = y.len();
    if n < spec.strata_bins.max(2) {
        return Err(EvalError::TooFewRows {
            rows: n,
            needed: spec.strata_bins.max(2),
        });
    }
    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| y[a].cmp_total(&y[b]).then(a.cmp(&b)));
    let mut strata = vec![Vec::new(); spec.strata_bins];
    for (rank, &i) in ranked.iter().enumerate() {
        strata[rank * spec.strata_bins / n].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = Split {
        train: Vec::new(),
        test: Vec::new(),
    };
    for mut s in strata {
        s.shuffle(&mut rng);
        let n_train = (spec.train_fraction * s.len() as f64).round() as usize;
        split.train.extend_from_slice(&s[..n_train]);
        split.test.extend_from_slice(&s[n_train..]);
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Per dataset, rows are grouped into consecutive fixed-length windows from
/// the dataset's first timestamp. The earliest windows go to train while
/// the train share is below the fraction; at least one window is always
/// held out, so every train timestamp precedes every test timestamp.
pub fn windowed_split(groups: &[String], timestamps: &[i64], spec: &SplitSpec) -> Result<Split, EvalError> {
    spec.validate()?;
    if groups.len() != timestamps.len() {
        return Err(EvalError::LengthMismatch(groups.len(), timestamps.len()));
    }
    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        by_group.entry(g).or_default().push(i);
    }
    let mut split = Split {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (label, rows) in by_group {
        let t0 = rows.iter().map(|&i| timestamps[i]).min().expect("non-empty group");
        let mut windows: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for &i in &rows {
            windows.entry((timestamps[i] - t0) / spec.window_length).or_default().push(i);
        }
        if windows.len() < 2 {
            return Err(EvalError::DatasetTooShort(label.to_string()));
        }
        let total = rows.len() as f64;
        let n_windows = windows.len();
        let mut taken = 0usize;
        for (k, (_, w)) in windows.into_iter().enumerate() {
            let to_train = k + 1 < n_windows && (taken as f64) < spec.train_fraction * total;
            if to_train {
                taken += w.len();
                split.train.extend(w);
            } else {
                split.test.extend(w);
            }
        }
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Seeded shuffle into `k` folds whose sizes differ by at most one.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, EvalError> {
    if k < 2 || k > n {
        return Err(EvalError::BadK { k, rows: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (pos, i) in idx.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Everything outside fold `j`.
pub fn complement(folds: &[Vec<usize>], j: usize) -> Vec<usize> {
    let mut v: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != j)
        .flat_map(|(_, f)| f.iter().copied())
        .collect();
    v.sort_unstable();
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: f64,
    pub mae: f64,
    /// Missing when the truth has zero variance.
    pub r2: Option<f64>,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparator: Option<String>,
}

pub fn metrics<T: Scalar>(pred: &[T], truth: &[T]) -> Result<EvalReport, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    let n = pred.len();
    if n < 2 {
        return Err(EvalError::TooFewRows { rows: n, needed: 2 });
    }
    let (p, t): (Vec<f64>, Vec<f64>) = pred.iter().zip(truth).map(|(a, b)| (a.as_f64(), b.as_f64())).unzip();
    let nf = n as f64;
    let sse: f64 = p.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum();
    let sae: f64 = p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum();
    let mean = t.iter().sum::<f64>() / nf;
    let sst: f64 = t.iter().map(|v| (v - mean).powi(2)).sum();
    Ok(EvalReport {
        rmse: (sse / nf).sqrt(),
        mae: sae / nf,
        r2: (sst > 0.0).then(|| 1.0 - sse / sst),
        n,
        p_value: None,
        comparator: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub t: f64,
    pub p: f64,
    pub n: usize,
}

/// Two-sided paired t-test on squared errors. When the differences have
/// no spread, `p` is 1 for a zero mean difference and 0 otherwise.
pub fn compare_models(errors_a: &[f64], errors_b: &[f64]) -> Result<PairedTest, EvalError> {
    if errors_a.len() != errors_b.len() {
        return Err(EvalError::LengthMismatch(errors_a.len(), errors_b.len()));
    }
    let n = errors_a.len();
    if n < 2 {
        return Err(EvalError::TooFewRows { rows: n, needed: 2 });
    }
    let d: Vec<f64> = errors_a.iter().zip(errors_b).map(|(a, b)| a * a - b * b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            PairedTest { t: 0.0, p: 1.0, n }
        } else {
            PairedTest {
                t: mean.signum() * f64::INFINITY,
                p: 0.0,
                n,
            }
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(PairedTest { t, p, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<EvalReport>,
    pub mean_rmse: f64,
    pub mean_mae: f64,
    pub mean_r2: Option<f64>,
    /// Out-of-fold prediction for every row.
    pub oof: Vec<f64>,
    pub fold_of: Vec<usize>,
}

/// Fits on all but one fold and scores the held-out fold, for every fold.
pub fn kfold_cv<T, P, F>(ds: &Dataset<T>, k: usize, seed: u64, fit: F) -> Result<CvReport, EvalError>
where
    T: Scalar,
    P: Predictor<T>,
    F: Fn(&Dataset<T>) -> Result<P, ModelError>,
{
    let folds = kfold_indices(ds.n_rows(), k, seed)?;
    let mut oof = vec![0.0; ds.n_rows()];
    let mut fold_of = vec![0; ds.n_rows()];
    let mut reports = Vec::with_capacity(k);
    for (j, f) in folds.iter().enumerate() {
        let model = fit(&ds.subset(&complement(&folds, j)))?;
        let val = ds.subset(f);
        let pred = model.predict(&val)?;
        for (&i, p) in f.iter().zip(&pred) {
            oof[i] = p.as_f64();
            fold_of[i] = j;
        }
        reports.push(if f.len() >= 2 {
            metrics(&pred, &val.y)?
        } else {
            let e = (pred[0] - val.y[0]).as_f64().abs();
            EvalReport {
                rmse: e,
                mae: e,
                r2: None,
                n: 1,
                p_value: None,
                comparator: None,
            }
        });
    }
    let kf = k as f64;
    let r2s: Vec<f64> = reports.iter().filter_map(|r| r.r2).collect();
    Ok(CvReport {
        mean_rmse: reports.iter().map(|r| r.rmse).sum::<f64>() / kf,
        mean_mae: reports.iter().map(|r| r.mae).sum::<f64>() / kf,
        mean_r2: (!r2s.is_empty()).then(|| r2s.iter().sum::<f64>() / r2s.len() as f64),
        folds: reports,
        oof,
        fold_of,
    })
}
