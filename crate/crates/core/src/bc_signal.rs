//! Conditioning of the BC ground truth: ATN-gated adaptive averaging (ONA)
//! and confidence-interval outlier trimming.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::ingest::BcSeries;
use crate::scalar::Scalar;
use crate::stats;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("cell {index} has a BC value but no ATN reading")]
    MissingAtn { index: usize },
    #[error("dataset {source_label:?}: zero variance but values differ from the mean")]
    DegenerateVariance { source_label: String },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnaConfig {
    /// Attenuation increment that closes an averaging window.
    pub delta_atn: f64,
}

impl Default for OnaConfig {
    fn default() -> Self {
        Self { delta_atn: 0.05 }
    }
}

/// A run of consecutive valid samples averaged together.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OnaWindow {
    /// Positions into the sequence passed to [`ona_windows`].
    pub start: usize,
    pub end: usize,
    /// False for the trailing window, which the record may have truncated.
    pub closed: bool,
}

impl OnaWindow {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Partitions an ATN sequence into averaging windows.
///
/// A window opened at sample `s` absorbs each following sample `i` while
/// `atn[i] - atn[s] < delta`. The first sample reaching the increment starts
/// the next window. A downward ATN jump (filter change) also starts a new
/// window.
pub fn ona_windows<T: Scalar>(atn: &[T], delta: T) -> Vec<OnaWindow> {
    let mut out = Vec::new();
    if atn.is_empty() {
        return out;
    }
    let mut start = 0;
    for i in 1..atn.len() {
        let reset = atn[i] < atn[i - 1];
        if reset || atn[i] - atn[start] >= delta {
            out.push(OnaWindow {
                start,
                end: i,
                closed: true,
            });
            start = i;
        }
    }
    out.push(OnaWindow {
        start,
        end: atn.len(),
        closed: false,
    });
    out
}

/// Replaces every value by the mean of its window. Returns the averaged values
/// and each sample's window size.
pub fn ona_average<T: Scalar>(values: &[T], atn: &[T], delta: T) -> (Vec<T>, Vec<usize>) {
    assert_eq!(values.len(), atn.len());
    let mut out = vec![T::zero(); values.len()];
    let mut sizes = vec![0; values.len()];
    for w in ona_windows(atn, delta) {
        let m = stats::mean(&values[w.start..w.end]).expect("windows are non-empty");
        for i in w.start..w.end {
            out[i] = m;
            sizes[i] = w.len();
        }
    }
    (out, sizes)
}

/// ONA over a gridded series. Cells with a missing BC value take no part in
/// windowing and stay missing; the output has the input's length.
pub fn ona_filter(series: &BcSeries, cfg: &OnaConfig) -> Result<BcSeries, SignalError> {
    if cfg.delta_atn < 0.0 || !cfg.delta_atn.is_finite() {
        return Err(SignalError::BadConfig(format!("delta_atn = {}", cfg.delta_atn)));
    }
    let mut idx = Vec::new();
    let mut vals = Vec::new();
    let mut atn = Vec::new();
    for (i, v) in series.values.iter().enumerate() {
        if let Some(v) = v {
            let a = series
                .atn
                .get(i)
                .copied()
                .flatten()
                .ok_or(SignalError::MissingAtn { index: i })?;
            idx.push(i);
            vals.push(*v);
            atn.push(a);
        }
    }
    let (avg, sizes) = ona_average(&vals, &atn, cfg.delta_atn);
    let mut out = series.clone();
    out.ona_pts = vec![None; series.len()];
    for (k, &i) in idx.iter().enumerate() {
        out.values[i] = Some(avg[k]);
        out.ona_pts[i] = Some(sizes[k] as u32);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Outlier trimming
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrimMode {
    /// One mean and deviation pooled over every dataset.
    Global,
    /// Statistics per source dataset.
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrimConfig {
    pub mode: TrimMode,
    pub level: f64,
}

impl Default for TrimConfig {
    fn default() -> Self {
        Self {
            mode: TrimMode::Local,
            level: 0.95,
        }
    }
}

/// Two-sided normal critical value at the tabulated two-decimal precision
/// (0.95 -> 1.96, 0.99 -> 2.58).
pub fn critical_value(level: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    let z = n.inverse_cdf(0.5 + level / 2.0);
    (z * 100.0).round() / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrimBounds {
    pub mean: f64,
    pub std: f64,
    pub z: f64,
    pub lower: f64,
    pub upper: f64,
}

impl TrimBounds {
    pub fn from_stats(mean: f64, std: f64, level: f64) -> Self {
        let z = critical_value(level);
        Self {
            mean,
            std,
            z,
            lower: mean - z * std,
            upper: mean + z * std,
        }
    }

    /// A value is an outlier iff |v - mean| > z * std.
    pub fn is_outlier(&self, v: f64) -> bool {
        (v - self.mean).abs() > self.z * self.std
    }
}

/// Anything carrying a trimmable target value and a source-dataset label.
pub trait Trimmable {
    fn trim_value(&self) -> Option<f64>;
    fn source(&self) -> &str;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Removed<R> {
    pub index: usize,
    pub value: f64,
    pub source: String,
    pub reason: String,
    pub row: R,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrimOutcome<R> {
    pub kept: Vec<R>,
    pub removed: Vec<Removed<R>>,
    /// Keyed by source label; the single key `"*"` in global mode.
    pub bounds: BTreeMap<String, TrimBounds>,
}

const POOLED: &str = "*";

/// Computes trimming bounds from the data; see [`trim_with_bounds`].
pub fn trim_bounds<R: Trimmable>(
    rows: &[R],
    cfg: &TrimConfig,
) -> Result<BTreeMap<String, TrimBounds>, SignalError> {
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(SignalError::BadConfig(format!("level = {}", cfg.level)));
    }
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows {
        if let Some(v) = r.trim_value() {
            let key = match cfg.mode {
                TrimMode::Global => POOLED.to_string(),
                TrimMode::Local => r.source().to_string(),
            };
            groups.entry(key).or_default().push(v);
        }
    }
    let mut out = BTreeMap::new();
    for (key, vals) in groups {
        let mean = stats::mean(&vals).expect("group is non-empty");
        let std = stats::sample_std(&vals).unwrap_or(0.0);
        if std == 0.0 && vals.iter().any(|&v| v != mean) {
            return Err(SignalError::DegenerateVariance { source_label: key });
        }
        out.insert(key, TrimBounds::from_stats(mean, std, cfg.level));
    }
    Ok(out)
}

/// Applies precomputed bounds. Rows without a value, or whose source has no
/// bounds, are kept.
pub fn trim_with_bounds<R: Trimmable + Clone>(
    rows: &[R],
    bounds: &BTreeMap<String, TrimBounds>,
) -> TrimOutcome<R> {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (index, r) in rows.iter().enumerate() {
        let b = bounds.get(POOLED).or_else(|| bounds.get(r.source()));
        match (r.trim_value(), b) {
            (Some(v), Some(b)) if b.is_outlier(v) => removed.push(Removed {
                index,
                value: v,
                source: r.source().to_string(),
                reason: format!(
                    "outside [{:.3}, {:.3}] (mean {:.3} +/- {} x {:.3})",
                    b.lower, b.upper, b.mean, b.z, b.std
                ),
                row: r.clone(),
            }),
            _ => kept.push(r.clone()),
        }
    }
    TrimOutcome {
        kept,
        removed,
        bounds: bounds.clone(),
    }
}

/// Removes values with |v - mean| > z * std, where mean and sample std come
/// from the pooled rows (global) or from each source dataset (local).
/// Intended for training partitions only.
pub fn trim_outliers<R: Trimmable + Clone>(
    rows: &[R],
    cfg: &TrimConfig,
) -> Result<TrimOutcome<R>, SignalError> {
    let bounds = trim_bounds(rows, cfg)?;
    Ok(trim_with_bounds(rows, &bounds))
}

/// A single gridded BC cell, used to trim whole series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesPoint {
    pub source: String,
    pub index: usize,
    pub timestamp: i64,
    pub value: f64,
}

impl Trimmable for SeriesPoint {
    fn trim_value(&self) -> Option<f64> {
        Some(self.value)
    }
    fn source(&self) -> &str {
        &self.source
    }
}

/// Trims a series in place of its cells, marking removed cells missing.
pub fn trim_series(
    series: &BcSeries,
    source: &str,
    cfg: &TrimConfig,
) -> Result<(BcSeries, Vec<Removed<SeriesPoint>>), SignalError> {
    let points: Vec<SeriesPoint> = series
        .values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| {
            v.map(|value| SeriesPoint {
                source: source.to_string(),
                index: i,
                timestamp: series.time_at(i),
                value,
            })
        })
        .collect();
    let outcome = trim_outliers(&points, cfg)?;
    let mut out = series.clone();
    for r in &outcome.removed {
        out.values[r.row.index] = None;
    }
    Ok((out, outcome.removed))
}
