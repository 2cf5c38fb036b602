//! Thirty-second feature rows: vehicle counts per lane and class, lagged
//! weather, traffic density and the BC target. Also correlation pruning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::bc_signal::Trimmable;
use crate::dataset::Dataset;
use crate::ingest::{BcSeries, IngestError, TrafficDensitySample, WeatherKind, WeatherSample};
use crate::vision::BinCounts;
use crate::{stats, timefmt, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("no weather sample near bin starting at {bin}")]
    NoWeatherCoverage { bin: i64 },
    #[error("need at least 3 rows, got {rows}")]
    TooFewRows { rows: usize },
    #[error("row at {timestamp} has no target")]
    MissingTarget { timestamp: i64 },
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("inconsistent lane counts: {0}")]
    LaneMismatch(String),
}

/// Which BC column is regressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// ONA-processed BC.
    #[default]
    BcPost,
    BcRaw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub dataset: String,
    pub timestamp: i64,
    /// Per-lane counts, index 0 is lane 1.
    pub ldpv: Vec<u32>,
    pub hdv: Vec<u32>,
    pub stop_ldpv: Vec<u32>,
    pub stop_hdv: Vec<u32>,
    pub his_temp: f64,
    pub his_wind: f64,
    pub his_humid: f64,
    pub traffic: Option<f64>,
    pub bc_raw: Option<f64>,
    pub bc_post: Option<f64>,
    /// `forecast_*` values, kept for reference but not modelled by default.
    pub forecast: BTreeMap<String, f64>,
}

impl FeatureRow {
    pub fn lanes(&self) -> usize {
        self.ldpv.len()
    }

    pub fn total_vehicle(&self) -> u32 {
        self.ldpv.iter().chain(&self.hdv).sum()
    }

    pub fn target(&self, t: Target) -> Option<f64> {
        match t {
            Target::BcPost => self.bc_post,
            Target::BcRaw => self.bc_raw,
        }
    }

    /// Value of a named model feature; `None` for unknown names or lanes.
    pub fn feature(&self, name: &str) -> Option<f64> {
        let lane = |prefix: &str, v: &[u32]| -> Option<f64> {
            let l: usize = name.strip_prefix(prefix)?.parse().ok()?;
            v.get(l.checked_sub(1)?).map(|&c| c as f64)
        };
        match name {
            "TotalVehicle" => Some(self.total_vehicle() as f64),
            "his_temp" => Some(self.his_temp),
            "his_wind" => Some(self.his_wind),
            "his_humid" => Some(self.his_humid),
            "traffic" => Some(self.traffic.unwrap_or(f64::NAN)),
            _ => lane("StopLDPV_", &self.stop_ldpv)
                .or_else(|| lane("StopHDV_", &self.stop_hdv))
                .or_else(|| lane("LDPV_", &self.ldpv))
                .or_else(|| lane("HDV_", &self.hdv)),
        }
    }

    /// Exported JSON object. Keys are emitted for every lane.
    pub fn to_json(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("Time".into(), Value::from(timefmt::format_log(self.timestamp)));
        m.insert("BC".into(), opt_num(self.bc_raw));
        m.insert("BC post".into(), opt_num(self.bc_post));
        for l in 0..self.lanes() {
            let k = l + 1;
            m.insert(format!("car_line{k}"), Value::from(self.ldpv[l]));
            m.insert(format!("truck_line{k}"), Value::from(self.hdv[l]));
            m.insert(format!("car_line{k}_stop"), Value::from(self.stop_ldpv[l]));
            m.insert(format!("truck_line{k}_stop"), Value::from(self.stop_hdv[l]));
        }
        if let Some(t) = self.traffic {
            m.insert("traffic".into(), num(t));
        }
        m.insert("history_temperature".into(), num(self.his_temp));
        m.insert("history_wind_speed".into(), num(self.his_wind));
        m.insert("history_humidity".into(), num(self.his_humid));
        for (k, v) in &self.forecast {
            m.insert(k.clone(), num(*v));
        }
        if !self.dataset.is_empty() {
            m.insert("dataset".into(), Value::from(self.dataset.clone()));
        }
        m
    }

    pub fn from_json(row: usize, obj: &Map<String, Value>) -> Result<Self, IngestError> {
        let missing = |key: &str| IngestError::MissingKey {
            row,
            key: key.to_string(),
        };
        let mismatch = |key: &str| IngestError::TypeMismatch {
            row,
            key: key.to_string(),
        };
        let number = |key: &str| -> Result<f64, IngestError> {
            obj.get(key)
                .ok_or_else(|| missing(key))?
                .as_f64()
                .ok_or_else(|| mismatch(key))
        };
        let nullable = |key: &str| -> Result<Option<f64>, IngestError> {
            match obj.get(key) {
                None | Some(Value::Null) => Ok(None),
                Some(v) => v.as_f64().map(Some).ok_or_else(|| mismatch(key)),
            }
        };
        let timestamp = match obj.get("Time").ok_or_else(|| missing("Time"))? {
            Value::String(s) => timefmt::parse_timestamp(s).ok_or_else(|| mismatch("Time"))?,
            Value::Number(n) => n.as_i64().ok_or_else(|| mismatch("Time"))?,
            _ => return Err(mismatch("Time")),
        };
        let his_temp = number("history_temperature")?;
        let his_wind = number("history_wind_speed")?;
        let his_humid = number("history_humidity")?;
        if !(0.0..=100.0).contains(&his_humid) {
            return Err(IngestError::OutOfRange {
                row,
                field: "history_humidity".into(),
                value: his_humid,
            });
        }
        if his_wind < 0.0 {
            return Err(IngestError::OutOfRange {
                row,
                field: "history_wind_speed".into(),
                value: his_wind,
            });
        }

        // (class, lane, stop) -> count
        let mut counts: BTreeMap<(bool, usize, bool), u32> = BTreeMap::new();
        let mut forecast = BTreeMap::new();
        let mut dataset = String::new();
        for (k, v) in obj {
            match k.as_str() {
                "Time" | "BC" | "BC post" | "traffic" | "history_temperature"
                | "history_wind_speed" | "history_humidity" => {}
                "dataset" => dataset = v.as_str().ok_or_else(|| mismatch(k))?.to_string(),
                _ if k.starts_with("forecast_") => {
                    forecast.insert(k.clone(), v.as_f64().ok_or_else(|| mismatch(k))?);
                }
                _ => {
                    let (truck, rest) = if let Some(r) = k.strip_prefix("car_line") {
                        (false, r)
                    } else if let Some(r) = k.strip_prefix("truck_line") {
                        (true, r)
                    } else {
                        return Err(IngestError::MalformedRow {
                            line: row,
                            reason: format!("unknown key {k:?}"),
                        });
                    };
                    let (lane, stop) = match rest.strip_suffix("_stop") {
                        Some(l) => (l, true),
                        None => (rest, false),
                    };
                    let lane: usize = lane
                        .parse()
                        .ok()
                        .filter(|&l| l >= 1)
                        .ok_or_else(|| IngestError::MalformedRow {
                            line: row,
                            reason: format!("bad lane in key {k:?}"),
                        })?;
                    let c = v.as_u64().ok_or_else(|| mismatch(k))?;
                    counts.insert((truck, lane, stop), c as u32);
                }
            }
        }
        let lanes = counts.keys().map(|k| k.1).max().unwrap_or(0);
        let get = |truck, stop| -> Vec<u32> {
            (1..=lanes)
                .map(|l| counts.get(&(truck, l, stop)).copied().unwrap_or(0))
                .collect()
        };
        Ok(Self {
            dataset,
            timestamp,
            ldpv: get(false, false),
            hdv: get(true, false),
            stop_ldpv: get(false, true),
            stop_hdv: get(true, true),
            his_temp,
            his_wind,
            his_humid,
            traffic: nullable("traffic")?,
            bc_raw: nullable("BC")?,
            bc_post: nullable("BC post")?,
            forecast,
        })
    }
}

fn num(v: f64) -> Value {
    if v.fract() == 0.0 && v.abs() < 9.0e15 {
        Value::from(v as i64)
    } else {
        Value::from(v)
    }
}

fn opt_num(v: Option<f64>) -> Value {
    v.map(num).unwrap_or(Value::Null)
}

impl Trimmable for FeatureRow {
    fn trim_value(&self) -> Option<f64> {
        self.bc_post
    }
    fn source(&self) -> &str {
        &self.dataset
    }
}

/// Trims on the raw BC column instead of the ONA output.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTarget(pub FeatureRow);

impl Trimmable for RawTarget {
    fn trim_value(&self) -> Option<f64> {
        self.0.bc_raw
    }
    fn source(&self) -> &str {
        &self.0.dataset
    }
}

/// Feature rows from a JSON array or newline-delimited JSON objects.
pub fn parse_feature_rows(text: &[u8]) -> Result<Vec<FeatureRow>, IngestError> {
    let s = std::str::from_utf8(text).map_err(|e| IngestError::Json(e.to_string()))?;
    let trimmed = s.trim_start();
    let values: Vec<Value> = if trimmed.is_empty() {
        Vec::new()
    } else if trimmed.starts_with('[') {
        serde_json::from_str(trimmed).map_err(|e| IngestError::Json(e.to_string()))?
    } else {
        serde_json::Deserializer::from_str(s)
            .into_iter::<Value>()
            .map(|v| {
                v.map_err(|e| IngestError::MalformedRow {
                    line: e.line(),
                    reason: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?
    };
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let obj = v.as_object().ok_or(IngestError::TypeMismatch {
                row: i + 1,
                key: "<row>".into(),
            })?;
            FeatureRow::from_json(i + 1, obj)
        })
        .collect()
}

pub fn write_feature_rows(rows: &[FeatureRow]) -> String {
    let arr: Vec<Value> = rows.iter().map(|r| Value::Object(r.to_json())).collect();
    serde_json::to_string_pretty(&arr).expect("json values serialize")
}

pub fn write_feature_csv(rows: &[FeatureRow], names: &[String]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["dataset".to_string(), "Time".into(), "BC".into(), "BC post".into()];
    header.extend(names.iter().cloned());
    w.write_record(&header).expect("in-memory write");
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let mut rec = vec![
            r.dataset.clone(),
            timefmt::format_iso(r.timestamp),
            f(r.bc_raw),
            f(r.bc_post),
        ];
        rec.extend(names.iter().map(|n| f(r.feature(n).filter(|v| !v.is_nan()))));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

// ---------------------------------------------------------------------------
// Table construction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub bin_seconds: i64,
    /// Weather is read this many seconds before the bin start.
    pub weather_lag: i64,
    /// Largest tolerated distance to the nearest weather sample.
    pub weather_max_gap: i64,
    /// Traffic density is joined within this many seconds.
    pub traffic_window: i64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            bin_seconds: 30,
            weather_lag: 120,
            weather_max_gap: 600,
            traffic_window: 300,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    /// Bin starts dropped for lack of a target value.
    pub without_target: Vec<i64>,
}

/// Nearest sample by timestamp, earlier sample on ties.
fn nearest<S>(sorted: &[S], t: i64, ts: impl Fn(&S) -> i64) -> Option<(&S, i64)> {
    let i = sorted.partition_point(|s| ts(s) < t);
    let mut best: Option<(&S, i64)> = None;
    for j in [i.checked_sub(1), Some(i)].into_iter().flatten() {
        if let Some(s) = sorted.get(j) {
            let d = (ts(s) - t).abs();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((s, d));
            }
        }
    }
    best
}

pub struct BuildInputs<'a> {
    pub dataset: &'a str,
    pub counts: &'a [BinCounts],
    pub weather: &'a [WeatherSample],
    pub traffic: &'a [TrafficDensitySample],
    pub bc_raw: &'a BcSeries,
    pub bc_post: Option<&'a BcSeries>,
    pub target: Target,
}

/// Joins counts, weather at `bin_start - weather_lag`, traffic and BC into
/// one row per bin. Bins lacking the chosen target are dropped and listed in
/// the report.
pub fn build_feature_table(
    inp: &BuildInputs<'_>,
    cfg: &FeatureConfig,
) -> Result<(Vec<FeatureRow>, BuildReport), FeatureError> {
    let mut counts: Vec<&BinCounts> = inp.counts.iter().collect();
    counts.sort_by_key(|c| c.bin_start);
    let mut hist: Vec<&WeatherSample> = inp
        .weather
        .iter()
        .filter(|w| w.kind == WeatherKind::Historical)
        .collect();
    hist.sort_by_key(|w| w.timestamp);
    let mut fc: Vec<&WeatherSample> = inp
        .weather
        .iter()
        .filter(|w| w.kind == WeatherKind::Forecast)
        .collect();
    fc.sort_by_key(|w| w.timestamp);
    let mut traffic: Vec<&TrafficDensitySample> = inp.traffic.iter().collect();
    traffic.sort_by_key(|s| s.timestamp);

    let lanes = counts.first().map(|c| c.ldpv.len()).unwrap_or(0);
    let mut rows = Vec::new();
    let mut report = BuildReport::default();
    for c in counts {
        if c.ldpv.len() != lanes {
            return Err(FeatureError::LaneMismatch(format!(
                "bin {} has {} lanes, expected {lanes}",
                c.bin_start,
                c.ldpv.len()
            )));
        }
        let (b0, b1) = (c.bin_start, c.bin_start + cfg.bin_seconds);
        let bc_raw = inp.bc_raw.value_in(b0, b1);
        let bc_post = inp.bc_post.and_then(|s| s.value_in(b0, b1));
        let target = match inp.target {
            Target::BcPost => bc_post,
            Target::BcRaw => bc_raw,
        };
        if target.is_none() {
            report.without_target.push(b0);
            continue;
        }
        let probe = b0 - cfg.weather_lag;
        let w = match nearest(&hist, probe, |w| w.timestamp) {
            Some((w, d)) if d <= cfg.weather_max_gap => *w,
            _ => return Err(FeatureError::NoWeatherCoverage { bin: b0 }),
        };
        let mut forecast = BTreeMap::new();
        if let Some((f, d)) = nearest(&fc, probe, |w| w.timestamp) {
            if d <= cfg.weather_max_gap {
                forecast.insert("forecast_temperature".to_string(), f.temperature);
                forecast.insert("forecast_wind_speed".to_string(), f.wind_speed);
                forecast.insert("forecast_humidity".to_string(), f.humidity);
            }
        }
        let traffic = nearest(&traffic, b0, |s| s.timestamp)
            .filter(|(_, d)| *d <= cfg.traffic_window)
            .map(|(s, _)| s.ratio);
        rows.push(FeatureRow {
            dataset: inp.dataset.to_string(),
            timestamp: b0,
            ldpv: c.ldpv.clone(),
            hdv: c.hdv.clone(),
            stop_ldpv: c.stop_ldpv.clone(),
            stop_hdv: c.stop_hdv.clone(),
            his_temp: w.temperature,
            his_wind: w.wind_speed,
            his_humid: w.humidity,
            traffic,
            bc_raw,
            bc_post,
            forecast,
        });
    }
    Ok((rows, report))
}

/// Model feature names for `lanes` lanes, optionally with traffic density.
pub fn default_feature_names(lanes: usize, traffic: bool) -> Vec<String> {
    let mut v = vec!["TotalVehicle".to_string()];
    for prefix in ["LDPV_", "HDV_", "StopLDPV_", "StopHDV_"] {
        v.extend((1..=lanes).map(|l| format!("{prefix}{l}")));
    }
    v.extend(["his_temp", "his_wind", "his_humid"].map(String::from));
    if traffic {
        v.push("traffic".into());
    }
    v
}

/// Design matrix over `names`; every row must carry the target.
pub fn to_dataset<T: Scalar>(
    rows: &[FeatureRow],
    names: &[String],
    target: Target,
) -> Result<Dataset<T>, FeatureError> {
    let mut x = Vec::with_capacity(rows.len());
    let mut y = Vec::with_capacity(rows.len());
    for r in rows {
        let t = r.target(target).ok_or(FeatureError::MissingTarget {
            timestamp: r.timestamp,
        })?;
        let xr: Result<Vec<T>, FeatureError> = names
            .iter()
            .map(|n| {
                r.feature(n)
                    .map(T::of)
                    .ok_or_else(|| FeatureError::UnknownFeature(n.clone()))
            })
            .collect();
        x.push(xr?);
        y.push(T::of(t));
    }
    Ok(Dataset {
        names: names.to_vec(),
        x,
        y,
        groups: rows.iter().map(|r| r.dataset.clone()).collect(),
        timestamps: rows.iter().map(|r| r.timestamp).collect(),
    })
}

// ---------------------------------------------------------------------------
// Correlation pruning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedFeature {
    pub feature: String,
    pub kept_partner: String,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub names: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    /// Features with zero variance; their off-diagonal r is reported as 0.
    pub constant: Vec<String>,
    pub dropped: Vec<DroppedFeature>,
}

impl CorrelationReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![String::new()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (n, row) in self.names.iter().zip(&self.matrix) {
            let mut rec = vec![n.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

/// Pearson r over the finite pairs; 0 when either side is constant.
fn pair_r<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let (xa, xb): (Vec<T>, Vec<T>) = a
        .iter()
        .zip(b)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(x, y)| (*x, *y))
        .unzip();
    if xa.len() < 2 {
        return 0.0;
    }
    stats::pearson(&xa, &xb).map(|r| r.as_f64()).unwrap_or(0.0)
}

pub fn correlation_matrix<T: Scalar>(ds: &Dataset<T>) -> Result<CorrelationReport, FeatureError> {
    if ds.n_rows() < 3 {
        return Err(FeatureError::TooFewRows { rows: ds.n_rows() });
    }
    let cols: Vec<Vec<T>> = (0..ds.n_features()).map(|j| ds.column(j)).collect();
    let f = cols.len();
    let mut matrix = vec![vec![0.0; f]; f];
    for i in 0..f {
        matrix[i][i] = 1.0;
        for j in i + 1..f {
            let r = pair_r(&cols[i], &cols[j]);
            matrix[i][j] = r;
            matrix[j][i] = r;
        }
    }
    let constant = cols
        .iter()
        .zip(&ds.names)
        .filter(|(c, _)| {
            let fin: Vec<&T> = c.iter().filter(|v| v.is_finite()).collect();
            fin.windows(2).all(|w| w[0] == w[1])
        })
        .map(|(_, n)| n.clone())
        .collect();
    Ok(CorrelationReport {
        names: ds.names.clone(),
        matrix,
        constant,
        dropped: Vec::new(),
    })
}

/// Removes features until no pair has |r| above `threshold`. Pairs are
/// visited from the most correlated down; each drops the member less
/// correlated with the target (on ties, the lexicographically later name).
/// Dropped features that no longer conflict with any survivor are then
/// restored, strongest first, so the kept set is maximal.
pub fn filter_correlated<T: Scalar>(
    ds: &Dataset<T>,
    threshold: f64,
) -> Result<(Dataset<T>, CorrelationReport), FeatureError> {
    let mut report = correlation_matrix(ds)?;
    let f = ds.n_features();
    let to_target: Vec<f64> = (0..f).map(|j| pair_r(&ds.column(j), &ds.y).abs()).collect();
    let names = &ds.names;
    let m = &report.matrix;

    let mut pairs: Vec<(usize, usize)> = (0..f)
        .flat_map(|i| (i + 1..f).map(move |j| (i, j)))
        .filter(|&(i, j)| m[i][j].abs() > threshold)
        .collect();
    pairs.sort_by(|&(a, b), &(c, d)| {
        m[c][d]
            .abs()
            .total_cmp(&m[a][b].abs())
            .then_with(|| (&names[a], &names[b]).cmp(&(&names[c], &names[d])))
    });
    // `stronger(a, b)` is true when `a` survives a conflict with `b`.
    let stronger = |a: usize, b: usize| match to_target[a].total_cmp(&to_target[b]) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => names[a] < names[b],
    };
    let mut kept = vec![true; f];
    let mut partner = vec![None; f];
    for (i, j) in pairs {
        if !(kept[i] && kept[j]) {
            continue;
        }
        let (win, lose) = if stronger(i, j) { (i, j) } else { (j, i) };
        kept[lose] = false;
        partner[lose] = Some(win);
    }
    let mut dropped: Vec<usize> = (0..f).filter(|&j| !kept[j]).collect();
    dropped.sort_by(|&a, &b| {
        if stronger(a, b) {
            std::cmp::Ordering::Less
        } else {
            std::cmp::Ordering::Greater
        }
    });
    for &d in &dropped {
        if (0..f).all(|k| !kept[k] || m[d][k].abs() <= threshold) {
            kept[d] = true;
        }
    }
    for d in dropped {
        if kept[d] {
            continue;
        }
        let p = partner[d]
            .filter(|&p| kept[p])
            .or_else(|| (0..f).find(|&k| kept[k] && m[d][k].abs() > threshold))
            .expect("a dropped feature conflicts with a survivor");
        report.dropped.push(DroppedFeature {
            feature: names[d].clone(),
            kept_partner: names[p].clone(),
            r: m[d][p],
        });
    }
    let keep_names: Vec<String> = (0..f).filter(|&j| kept[j]).map(|j| names[j].clone()).collect();
    let out = ds.select(&keep_names).expect("kept names exist");
    Ok((out, report))
}
