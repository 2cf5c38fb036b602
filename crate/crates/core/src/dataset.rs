//! Dense design matrix shared by the learners, splitters and explainers.

use serde::{Deserialize, Serialize};

use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Dataset<T: Scalar> {
    pub names: Vec<String>,
    /// Row-major features; `NaN` marks a missing value.
    pub x: Vec<Vec<T>>,
    pub y: Vec<T>,
    /// Source dataset label of each row.
    pub groups: Vec<String>,
    pub timestamps: Vec<i64>,
}

impl<T: Scalar> Dataset<T> {
    /// Unlabelled rows with unit timestamps; handy for synthetic problems.
    pub fn from_xy(names: Vec<String>, x: Vec<Vec<T>>, y: Vec<T>) -> Self {
        let n = y.len();
        assert_eq!(x.len(), n, "row count mismatch");
        Self {
            names,
            x,
            y,
            groups: vec![String::new(); n],
            timestamps: (0..n as i64).collect(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_features(&self) -> usize {
        self.names.len()
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        self.x.iter().map(|r| r[j]).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            names: self.names.clone(),
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            groups: idx.iter().map(|&i| self.groups[i].clone()).collect(),
            timestamps: idx.iter().map(|&i| self.timestamps[i]).collect(),
        }
    }

    /// Keeps only the named columns, in the given order.
    pub fn select(&self, names: &[String]) -> Option<Self> {
        let cols: Option<Vec<usize>> = names
            .iter()
            .map(|n| self.names.iter().position(|m| m == n))
            .collect();
        let cols = cols?;
        Some(Self {
            names: names.to_vec(),
            x: self
                .x
                .iter()
                .map(|r| cols.iter().map(|&j| r[j]).collect())
                .collect(),
            y: self.y.clone(),
            groups: self.groups.clone(),
            timestamps: self.timestamps.clone(),
        })
    }

    pub fn concat(parts: &[Self]) -> Option<Self> {
        let first = parts.first()?;
        let mut out = Self {
            names: first.names.clone(),
            x: Vec::new(),
            y: Vec::new(),
            groups: Vec::new(),
            timestamps: Vec::new(),
        };
        for p in parts {
            if p.names != out.names {
                return None;
            }
            out.x.extend(p.x.iter().cloned());
            out.y.extend(p.y.iter().copied());
            out.groups.extend(p.groups.iter().cloned());
            out.timestamps.extend(p.timestamps.iter().copied());
        }
        Some(out)
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        let c = |v: T| U::of(v.as_f64());
        Dataset {
            names: self.names.clone(),
            x: self.x.iter().map(|r| r.iter().map(|&v| c(v)).collect()).collect(),
            y: self.y.iter().map(|&v| c(v)).collect(),
            groups: self.groups.clone(),
            timestamps: self.timestamps.clone(),
        }
    }
}
