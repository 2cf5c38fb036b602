//! Parsers for the on-disk formats: microaethalometer CSV, detection event
//! logs, per-frame detection boxes, and recorded weather / traffic feeds.
//!
//! Every parser is total over its error domain. A row either yields a value
//! or a positioned [`IngestError`]; nothing is skipped silently.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timefmt;

pub use crate::features::{parse_feature_rows, write_feature_rows, FeatureRow};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("line {line}: timestamp does not increase")]
    NonMonotoneTime { line: usize },
    #[error("line {line}: unknown object class {token:?}")]
    UnknownClass { line: usize, token: String },
    #[error("line {line}: track id {id} already seen")]
    DuplicateTrack { line: usize, id: u64 },
    #[error("row {row}: missing key {key:?}")]
    MissingKey { row: usize, key: String },
    #[error("row {row}: key {key:?} has the wrong type")]
    TypeMismatch { row: usize, key: String },
    #[error("row {row}: {field} = {value} is out of range")]
    OutOfRange { row: usize, field: String, value: f64 },
    #[error("no samples to resample")]
    EmptyInput,
    #[error("json: {0}")]
    Json(String),
}

// ---------------------------------------------------------------------------
// AE51 microaethalometer CSV
// ---------------------------------------------------------------------------

pub const AE51_COLUMNS: [&str; 11] = [
    "Date",
    "Time",
    "Ref",
    "Sen",
    "ATN",
    "Flow",
    "Pcb temp",
    "Status",
    "Battery",
    "BC",
    "Ona_#_pts_avg",
];

/// One microaethalometer reading. `bc_raw` may be negative (instrument noise)
/// and is absent on the warm-up record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcSample {
    #[serde(with = "timefmt::iso")]
    pub timestamp: i64,
    pub ref_count: i64,
    pub sen_count: i64,
    pub atn: f64,
    pub flow: f64,
    pub pcb_temp: f64,
    pub status: i64,
    pub battery: f64,
    pub bc_raw: Option<f64>,
    pub ona_pts: Option<u32>,
}

fn field<T: FromStr>(rec: &csv::StringRecord, idx: usize, line: usize) -> Result<T, IngestError> {
    let raw = rec.get(idx).unwrap_or("").trim();
    raw.parse().map_err(|_| IngestError::MalformedRow {
        line,
        reason: format!("column {:?} = {raw:?}", AE51_COLUMNS[idx]),
    })
}

fn reader(text: &[u8]) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text)
}

fn csv_line(rec: &csv::StringRecord) -> usize {
    rec.position().map(|p| p.line() as usize).unwrap_or(0)
}

fn is_blank(rec: &csv::StringRecord) -> bool {
    rec.iter().all(|f| f.is_empty())
}

pub fn parse_ae51_csv(text: &[u8]) -> Result<Vec<BcSample>, IngestError> {
    let mut rdr = reader(text);
    let mut out: Vec<BcSample> = Vec::new();
    let mut saw_header = false;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| IngestError::MalformedRow {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            reason: e.to_string(),
        })?;
        if is_blank(&rec) {
            continue;
        }
        let line = csv_line(&rec);
        if !saw_header {
            let matches = rec.len() == AE51_COLUMNS.len()
                && rec
                    .iter()
                    .zip(AE51_COLUMNS)
                    .all(|(a, b)| a.eq_ignore_ascii_case(b));
            if !matches {
                return Err(IngestError::MalformedRow {
                    line,
                    reason: "header does not match the AE51 column layout".into(),
                });
            }
            saw_header = true;
            continue;
        }
        if rec.len() != AE51_COLUMNS.len() {
            return Err(IngestError::MalformedRow {
                line,
                reason: format!("expected {} columns, found {}", AE51_COLUMNS.len(), rec.len()),
            });
        }
        let date = timefmt::parse_date(&rec[0]).ok_or_else(|| IngestError::MalformedRow {
            line,
            reason: format!("bad date {:?}", &rec[0]),
        })?;
        let time = timefmt::parse_time(&rec[1]).ok_or_else(|| IngestError::MalformedRow {
            line,
            reason: format!("bad time {:?}", &rec[1]),
        })?;
        let timestamp = timefmt::join_date_time(date, time);
        if let Some(prev) = out.last() {
            if timestamp <= prev.timestamp {
                return Err(IngestError::NonMonotoneTime { line });
            }
        }
        let bc_raw = match rec[9].trim() {
            "" => None,
            _ => Some(field::<f64>(&rec, 9, line)?),
        };
        let ona_pts = match rec[10].trim() {
            "" => None,
            s if s.eq_ignore_ascii_case("null") => None,
            _ => Some(field::<u32>(&rec, 10, line)?),
        };
        let sample = BcSample {
            timestamp,
            ref_count: field(&rec, 2, line)?,
            sen_count: field(&rec, 3, line)?,
            atn: field(&rec, 4, line)?,
            flow: field(&rec, 5, line)?,
            pcb_temp: field(&rec, 6, line)?,
            status: field(&rec, 7, line)?,
            battery: field(&rec, 8, line)?,
            bc_raw,
            ona_pts,
        };
        if sample.flow <= 0.0 {
            return Err(IngestError::OutOfRange {
                row: line,
                field: "Flow".into(),
                value: sample.flow,
            });
        }
        if !(0.0..=100.0).contains(&sample.battery) {
            return Err(IngestError::OutOfRange {
                row: line,
                field: "Battery".into(),
                value: sample.battery,
            });
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn write_ae51_csv(samples: &[BcSample]) -> String {
    let mut s = AE51_COLUMNS.join(",");
    s.push('\n');
    for r in samples {
        let (date, time) = timefmt::format_ae51(r.timestamp);
        let bc = r.bc_raw.map(|v| v.to_string()).unwrap_or_default();
        let ona = r
            .ona_pts
            .map(|v| v.to_string())
            .unwrap_or_else(|| "NULL".to_string());
        s.push_str(&format!(
            "{date},{time},{},{},{},{},{},{},{},{bc},{ona}\n",
            r.ref_count, r.sen_count, r.atn, r.flow, r.pcb_temp, r.status, r.battery
        ));
    }
    s
}

// ---------------------------------------------------------------------------
// Detection event log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Car,
    Truck,
    Bus,
    Motorcycle,
    Bicycle,
    Person,
    Streetcar,
}

/// Emission class used for counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VehicleClass {
    Ldpv,
    Hdv,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 7] = [
        ObjectClass::Car,
        ObjectClass::Truck,
        ObjectClass::Bus,
        ObjectClass::Motorcycle,
        ObjectClass::Bicycle,
        ObjectClass::Person,
        ObjectClass::Streetcar,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Truck => "truck",
            ObjectClass::Bus => "bus",
            ObjectClass::Motorcycle => "motorcycle",
            ObjectClass::Bicycle => "bicycle",
            ObjectClass::Person => "person",
            ObjectClass::Streetcar => "streetcar",
        }
    }

    /// Streetcars are electric; people and bicycles do not emit.
    pub fn vehicle_class(self) -> Option<VehicleClass> {
        match self {
            ObjectClass::Car | ObjectClass::Motorcycle => Some(VehicleClass::Ldpv),
            ObjectClass::Truck | ObjectClass::Bus => Some(VehicleClass::Hdv),
            ObjectClass::Bicycle | ObjectClass::Person | ObjectClass::Streetcar => None,
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectClass {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        ObjectClass::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or(())
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub object_class: ObjectClass,
    /// 1-based lane index; `None` when the lane is unknown.
    pub lane: Option<u32>,
    pub track_id: u64,
    #[serde(with = "timefmt::iso")]
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroid: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

fn split_class_lane(token: &str, line: usize) -> Result<(ObjectClass, Option<u32>), IngestError> {
    let (class_tok, lane) = if let Some((c, l)) = token.rsplit_once("_line") {
        let lane: u32 = l.parse().map_err(|_| IngestError::MalformedRow {
            line,
            reason: format!("bad lane in {token:?}"),
        })?;
        if lane == 0 {
            return Err(IngestError::MalformedRow {
                line,
                reason: "lanes are numbered from 1".into(),
            });
        }
        (c, Some(lane))
    } else if let Some(c) = token.strip_suffix("_unknown") {
        (c, None)
    } else {
        return Err(IngestError::MalformedRow {
            line,
            reason: format!("expected <class>_line<k>, got {token:?}"),
        });
    };
    let class = class_tok.parse().map_err(|_| IngestError::UnknownClass {
        line,
        token: class_tok.to_string(),
    })?;
    Ok((class, lane))
}

/// Parses lines of the form `truck_line2 : 2777 2024-11-05 17:23:07`.
pub fn parse_event_log(text: &[u8]) -> Result<Vec<DetectionEvent>, IngestError> {
    let text = String::from_utf8_lossy(text);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() {
            continue;
        }
        let (token, rest) = l.split_once(':').ok_or_else(|| IngestError::MalformedRow {
            line,
            reason: "missing ':' separator".into(),
        })?;
        let (object_class, lane) = split_class_lane(token.trim(), line)?;
        let rest = rest.trim();
        let (id, ts) = rest
            .split_once(char::is_whitespace)
            .ok_or_else(|| IngestError::MalformedRow {
                line,
                reason: "expected '<id> <timestamp>'".into(),
            })?;
        let track_id: u64 = id.parse().map_err(|_| IngestError::MalformedRow {
            line,
            reason: format!("bad id {id:?}"),
        })?;
        let timestamp = timefmt::parse_timestamp(ts).ok_or_else(|| IngestError::MalformedRow {
            line,
            reason: format!("bad timestamp {:?}", ts.trim()),
        })?;
        if !seen.insert(track_id) {
            return Err(IngestError::DuplicateTrack { line, id: track_id });
        }
        out.push(DetectionEvent {
            object_class,
            lane,
            track_id,
            timestamp,
            centroid: None,
            bbox: None,
        });
    }
    Ok(out)
}

pub fn write_event_log(events: &[DetectionEvent]) -> String {
    let mut s = String::new();
    for e in events {
        let lane = match e.lane {
            Some(l) => format!("line{l}"),
            None => "unknown".to_string(),
        };
        s.push_str(&format!(
            "{}_{lane} : {} {}\n",
            e.object_class,
            e.track_id,
            timefmt::format_log(e.timestamp)
        ));
    }
    s
}

// ---------------------------------------------------------------------------
// Per-frame detection boxes (JSON)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: ObjectClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroid: Option<(f64, f64)>,
}

impl Detection {
    /// bbox center when a box is present, else the raw centroid.
    pub fn position(&self) -> Option<(f64, f64)> {
        self.bbox.map(|b| b.center()).or(self.centroid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFrame {
    /// Frame time in UTC seconds; fractional for sub-second frame rates.
    pub t: f64,
    pub detections: Vec<Detection>,
}

pub fn parse_detection_frames(text: &[u8]) -> Result<Vec<DetectionFrame>, IngestError> {
    let frames: Vec<DetectionFrame> =
        serde_json::from_slice(text).map_err(|e| IngestError::Json(e.to_string()))?;
    for (i, f) in frames.iter().enumerate() {
        for d in &f.detections {
            if d.position().is_none() {
                return Err(IngestError::MissingKey {
                    row: i,
                    key: "bbox|centroid".into(),
                });
            }
        }
    }
    Ok(frames)
}

// ---------------------------------------------------------------------------
// Weather and traffic density feeds
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeatherKind {
    Historical,
    Forecast,
}

impl FromStr for WeatherKind {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s.trim().to_ascii_lowercase().as_str() {
            "historical" | "history" => Ok(WeatherKind::Historical),
            "forecast" => Ok(WeatherKind::Forecast),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherSample {
    #[serde(with = "timefmt::iso")]
    pub timestamp: i64,
    /// °C
    pub temperature: f64,
    /// km/h
    pub wind_speed: f64,
    /// percent
    pub humidity: f64,
    pub kind: WeatherKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficDensitySample {
    #[serde(with = "timefmt::iso")]
    pub timestamp: i64,
    pub ratio: f64,
}

fn looks_like_json(text: &[u8]) -> bool {
    text.iter()
        .find(|b| !b.is_ascii_whitespace())
        .is_some_and(|&b| b == b'[' || b == b'{')
}

/// Reads a headered CSV into rows of (line, named columns).
fn csv_rows(text: &[u8], required: &[&str]) -> Result<Vec<(usize, Vec<String>)>, IngestError> {
    let mut rdr = reader(text);
    let mut idx: Option<Vec<usize>> = None;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| IngestError::MalformedRow {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            reason: e.to_string(),
        })?;
        if is_blank(&rec) {
            continue;
        }
        let line = csv_line(&rec);
        match &idx {
            None => {
                let mut cols = Vec::new();
                for name in required {
                    let pos = rec
                        .iter()
                        .position(|h| h.eq_ignore_ascii_case(name))
                        .ok_or_else(|| IngestError::MissingKey {
                            row: line,
                            key: name.to_string(),
                        })?;
                    cols.push(pos);
                }
                idx = Some(cols);
            }
            Some(cols) => {
                let vals = cols
                    .iter()
                    .map(|&c| {
                        rec.get(c).map(str::to_string).ok_or_else(|| IngestError::MalformedRow {
                            line,
                            reason: "short row".into(),
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                out.push((line, vals));
            }
        }
    }
    Ok(out)
}

fn num(v: &str, line: usize, name: &str) -> Result<f64, IngestError> {
    v.trim().parse().map_err(|_| IngestError::MalformedRow {
        line,
        reason: format!("{name} = {v:?} is not a number"),
    })
}

fn check_weather(w: &WeatherSample, row: usize) -> Result<(), IngestError> {
    if !(0.0..=100.0).contains(&w.humidity) {
        return Err(IngestError::OutOfRange {
            row,
            field: "humidity".into(),
            value: w.humidity,
        });
    }
    if w.wind_speed < 0.0 || !w.wind_speed.is_finite() {
        return Err(IngestError::OutOfRange {
            row,
            field: "wind_speed".into(),
            value: w.wind_speed,
        });
    }
    Ok(())
}

/// CSV (`timestamp,temperature,wind_speed,humidity,kind`) or a JSON array.
/// Output is sorted by timestamp.
pub fn parse_weather(text: &[u8]) -> Result<Vec<WeatherSample>, IngestError> {
    let mut out: Vec<WeatherSample> = if looks_like_json(text) {
        let v: Vec<WeatherSample> =
            serde_json::from_slice(text).map_err(|e| IngestError::Json(e.to_string()))?;
        for (i, w) in v.iter().enumerate() {
            check_weather(w, i)?;
        }
        v
    } else {
        let rows = csv_rows(
            text,
            &["timestamp", "temperature", "wind_speed", "humidity", "kind"],
        )?;
        let mut v = Vec::with_capacity(rows.len());
        for (line, r) in rows {
            let w = WeatherSample {
                timestamp: timefmt::parse_timestamp(&r[0]).ok_or_else(|| {
                    IngestError::MalformedRow {
                        line,
                        reason: format!("bad timestamp {:?}", r[0]),
                    }
                })?,
                temperature: num(&r[1], line, "temperature")?,
                wind_speed: num(&r[2], line, "wind_speed")?,
                humidity: num(&r[3], line, "humidity")?,
                kind: r[4].parse().map_err(|_| IngestError::MalformedRow {
                    line,
                    reason: format!("bad kind {:?}", r[4]),
                })?,
            };
            check_weather(&w, line)?;
            v.push(w);
        }
        v
    };
    out.sort_by_key(|w| w.timestamp);
    Ok(out)
}

pub fn write_weather_csv(samples: &[WeatherSample]) -> String {
    let mut s = String::from("timestamp,temperature,wind_speed,humidity,kind\n");
    for w in samples {
        let kind = match w.kind {
            WeatherKind::Historical => "historical",
            WeatherKind::Forecast => "forecast",
        };
        s.push_str(&format!(
            "{},{},{},{},{kind}\n",
            timefmt::format_iso(w.timestamp),
            w.temperature,
            w.wind_speed,
            w.humidity
        ));
    }
    s
}

/// CSV (`timestamp,ratio`) or a JSON array; sorted by timestamp.
pub fn parse_traffic(text: &[u8]) -> Result<Vec<TrafficDensitySample>, IngestError> {
    let mut out: Vec<TrafficDensitySample> = if looks_like_json(text) {
        serde_json::from_slice(text).map_err(|e| IngestError::Json(e.to_string()))?
    } else {
        csv_rows(text, &["timestamp", "ratio"])?
            .into_iter()
            .map(|(line, r)| {
                Ok(TrafficDensitySample {
                    timestamp: timefmt::parse_timestamp(&r[0]).ok_or_else(|| {
                        IngestError::MalformedRow {
                            line,
                            reason: format!("bad timestamp {:?}", r[0]),
                        }
                    })?,
                    ratio: num(&r[1], line, "ratio")?,
                })
            })
            .collect::<Result<_, IngestError>>()?
    };
    for (i, t) in out.iter().enumerate() {
        if !(0.0..=1.0).contains(&t.ratio) {
            return Err(IngestError::OutOfRange {
                row: i,
                field: "ratio".into(),
                value: t.ratio,
            });
        }
    }
    out.sort_by_key(|t| t.timestamp);
    Ok(out)
}

pub fn write_traffic_csv(samples: &[TrafficDensitySample]) -> String {
    let mut s = String::from("timestamp,ratio\n");
    for t in samples {
        s.push_str(&format!("{},{}\n", timefmt::format_iso(t.timestamp), t.ratio));
    }
    s
}

// ---------------------------------------------------------------------------
// Uniform grid
// ---------------------------------------------------------------------------

/// BC readings on a uniform time grid. `values` and `atn` are cell-aligned;
/// `ona_pts` holds per-cell averaging window sizes once ONA has run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcSeries {
    pub start: i64,
    pub step: i64,
    pub values: Vec<Option<f64>>,
    pub atn: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ona_pts: Vec<Option<u32>>,
}

impl BcSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn time_at(&self, i: usize) -> i64 {
        self.start + self.step * i as i64
    }

    /// One past the last covered second.
    pub fn end(&self) -> i64 {
        self.time_at(self.len())
    }

    /// Index of the cell whose span `[t_i, t_i + step)` contains `t`.
    pub fn cell_of(&self, t: i64) -> Option<usize> {
        if t < self.start {
            return None;
        }
        let i = ((t - self.start) / self.step) as usize;
        (i < self.len()).then_some(i)
    }

    /// The first non-missing value whose timestamp lies in `[t0, t1)`.
    pub fn value_in(&self, t0: i64, t1: i64) -> Option<f64> {
        (0..self.len())
            .filter(|&i| {
                let t = self.time_at(i);
                t >= t0 && t < t1
            })
            .find_map(|i| self.values[i])
    }
}

/// Grid anchored at the first sample; each cell takes the first sample whose
/// timestamp falls in `[t, t + step)`. Empty cells are missing. No
/// interpolation.
pub fn resample_to_grid(samples: &[BcSample], step: i64) -> Result<BcSeries, IngestError> {
    let first = samples.first().ok_or(IngestError::EmptyInput)?;
    assert!(step > 0, "grid step must be positive");
    let last = samples.last().expect("non-empty").timestamp;
    let n = ((last - first.timestamp) / step + 1) as usize;
    let mut values = vec![None; n];
    let mut atn = vec![None; n];
    let mut filled = vec![false; n];
    for s in samples {
        let i = ((s.timestamp - first.timestamp) / step) as usize;
        if !filled[i] {
            filled[i] = true;
            values[i] = s.bc_raw;
            atn[i] = Some(s.atn);
        }
    }
    Ok(BcSeries {
        start: first.timestamp,
        step,
        values,
        atn,
        ona_pts: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Session bundle
// ---------------------------------------------------------------------------

/// Summary of the lag correction applied to a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedShift {
    pub shift_seconds: i64,
    pub max_similarity: f64,
}

/// A period during which a tracked vehicle stood still.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopInterval {
    pub track_id: u64,
    pub object_class: ObjectClass,
    pub lane: Option<u32>,
    pub start: f64,
    pub end: f64,
}

/// Everything ingested for one recording site, carried between CLI stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub dataset: String,
    pub bc: BcSeries,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bc_post: Option<BcSeries>,
    pub events: Vec<DetectionEvent>,
    #[serde(default)]
    pub stops: Vec<StopInterval>,
    pub weather: Vec<WeatherSample>,
    #[serde(default)]
    pub traffic: Vec<TrafficDensitySample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<AppliedShift>,
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXCERPT: &str = "Date,Time,Ref,Sen,ATN,Flow,Pcb temp,Status,Battery,BC,Ona_#_pts_avg
2024/11/04,18:49:00,890665,921559,-3.40984263756,100,19,0,98,,NULL
2024/11/04,18:49:30,890783,921490,-3.3891073947402,99,19,0,98,2379,3
2024/11/04,18:50:00,890907,921527,-3.3792031816136,99,19,0,98,1136,3
2024/11/04,18:50:30,890941,921473,-3.369526908093,100,19,0,98,1099,3
2024/11/04,18:51:00,891037,921486,-3.3601631390269,100,19,0,98,1064,2
";

    #[test]
    fn ae51_excerpt_fields() {
        let rows = parse_ae51_csv(EXCERPT.as_bytes()).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].bc_raw, None);
        assert_eq!(rows[0].ona_pts, None);
        let r = &rows[1];
        assert_eq!(r.atn, -3.3891073947402);
        assert_eq!(r.bc_raw, Some(2379.0));
        assert_eq!(r.ona_pts, Some(3));
        assert_eq!(r.ref_count, 890783);
        assert_eq!(r.flow, 99.0);
        assert_eq!(rows[4].timestamp - rows[0].timestamp, 120);
    }

    #[test]
    fn ae51_round_trip_is_fixed_point() {
        let rows = parse_ae51_csv(EXCERPT.as_bytes()).unwrap();
        let text = write_ae51_csv(&rows);
        assert_eq!(text, EXCERPT);
        assert_eq!(parse_ae51_csv(text.as_bytes()).unwrap(), rows);
    }

    #[test]
    fn ae51_empty_and_errors() {
        assert!(parse_ae51_csv(b"").unwrap().is_empty());
        let short = format!("{}2024/11/04,18:52:00,1,2,3\n", EXCERPT);
        assert!(matches!(
            parse_ae51_csv(short.as_bytes()),
            Err(IngestError::MalformedRow { line: 7, .. })
        ));
        let back = format!("{}2024/11/04,18:50:00,1,2,-3.3,100,19,0,98,5,1\n", EXCERPT);
        assert_eq!(
            parse_ae51_csv(back.as_bytes()),
            Err(IngestError::NonMonotoneTime { line: 7 })
        );
        let lower = EXCERPT.replacen("Date,Time,Ref", "date,time,REF", 1);
        assert_eq!(parse_ae51_csv(lower.as_bytes()).unwrap().len(), 5);
    }

    const LOG: &str = " car_line1 : 2771 2024-11-05 17:23:02
 car_line1 : 2775 2024-11-05 17:23:03
 car_line2 : 2790 2024-11-05 17:23:05
 truck_line2 : 2777 2024-11-05 17:23:07
 person_line1 : 2785 2024-11-05 17:23:09
 bicycle_line1 : 2795 2024-11-05 17:23:09
";

    #[test]
    fn event_log_excerpt() {
        let ev = parse_event_log(LOG.as_bytes()).unwrap();
        assert_eq!(ev.len(), 6);
        assert_eq!(ev[3].object_class, ObjectClass::Truck);
        assert_eq!(ev[3].lane, Some(2));
        assert_eq!(ev[3].track_id, 2777);
        assert_eq!(ev[5].object_class, ObjectClass::Bicycle);
        assert_eq!(ev[5].object_class.vehicle_class(), None);
        let again = parse_event_log(write_event_log(&ev).as_bytes()).unwrap();
        assert_eq!(again, ev);
    }

    #[test]
    fn event_log_errors() {
        assert!(parse_event_log(b"\n  \n\n").unwrap().is_empty());
        assert_eq!(
            parse_event_log(b"tram_line1 : 1 2024-11-05 17:23:02"),
            Err(IngestError::UnknownClass {
                line: 1,
                token: "tram".into()
            })
        );
        assert!(matches!(
            parse_event_log(b"car_line1 2771 2024-11-05 17:23:02"),
            Err(IngestError::MalformedRow { line: 1, .. })
        ));
        assert!(matches!(
            parse_event_log(b"car_line1 : 1 2024-11-05 17:23:02\ncar_line2 : 1 2024-11-05 17:23:03"),
            Err(IngestError::DuplicateTrack { line: 2, id: 1 })
        ));
    }

    #[test]
    fn weather_sorted_and_validated() {
        let csv = "timestamp,temperature,wind_speed,humidity,kind
2024-11-05 17:40:00,19.0,20.0,66,historical
2024-11-05 17:30:00,19.1,24.5,68,historical
";
        let w = parse_weather(csv.as_bytes()).unwrap();
        assert_eq!(w.len(), 2);
        assert!(w[0].timestamp < w[1].timestamp);
        assert_eq!(w[0].wind_speed, 24.5);
        let one = "timestamp,temperature,wind_speed,humidity,kind\n0,1,2,3,forecast\n";
        assert_eq!(parse_weather(one.as_bytes()).unwrap().len(), 1);
        let bad = "timestamp,temperature,wind_speed,humidity,kind\n0,1,2,120,forecast\n";
        assert!(matches!(
            parse_weather(bad.as_bytes()),
            Err(IngestError::OutOfRange { .. })
        ));
        let json = serde_json::to_vec(&w).unwrap();
        assert_eq!(parse_weather(&json).unwrap(), w);
    }

    fn sample(ts: i64, bc: f64) -> BcSample {
        BcSample {
            timestamp: ts,
            ref_count: 0,
            sen_count: 0,
            atn: ts as f64 * 1e-3,
            flow: 100.0,
            pcb_temp: 19.0,
            status: 0,
            battery: 90.0,
            bc_raw: Some(bc),
            ona_pts: None,
        }
    }

    #[test]
    fn resample_identity_and_gap() {
        let s: Vec<_> = (0..6).map(|i| sample(1000 + 30 * i, i as f64)).collect();
        let g = resample_to_grid(&s, 30).unwrap();
        assert_eq!(g.values, (0..6).map(|i| Some(i as f64)).collect::<Vec<_>>());

        let mut gap = s.clone();
        gap.remove(3);
        let g = resample_to_grid(&gap, 30).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g.values.iter().filter(|v| v.is_none()).count(), 1);
        assert_eq!(g.values[3], None);
        assert_eq!(resample_to_grid(&[], 30), Err(IngestError::EmptyInput));
    }

    #[test]
    fn resample_matches_rescan_oracle() {
        // 10 s samples with jitter onto a 30 s grid.
        let mut s = Vec::new();
        let mut t = 5000;
        for i in 0..200 {
            t += 7 + (i * 37 % 11) as i64;
            if i % 13 == 5 {
                continue;
            }
            s.push(sample(t, i as f64));
        }
        let g = resample_to_grid(&s, 30).unwrap();
        for i in 0..g.len() {
            let lo = g.time_at(i);
            let expect = s
                .iter()
                .find(|x| x.timestamp >= lo && x.timestamp < lo + 30)
                .and_then(|x| x.bc_raw);
            assert_eq!(g.values[i], expect, "cell {i}");
        }
        // Never invents values.
        for v in g.values.iter().flatten() {
            assert!(s.iter().any(|x| x.bc_raw == Some(*v)));
        }
    }
}
