//! Seeded synthetic recording sessions with known ground truth.
//!
//! Vehicles enter each lane at the left edge of a 640x360 frame and drive
//! right at constant speed. A periodic stop wave freezes every vehicle on
//! screen for `dwell` seconds. BC at activity time `s` is
//! `background + sum(w_k f_k(s))`, optionally divided by `1 + c * wind`, and
//! is observed `planted_lag` seconds later, averaged over each instrument
//! cell, plus Gaussian noise.
//!
//! Per-second features: `LDPV_l`/`HDV_l` are entries at `s` (weights are
//! integrated responses, ng/m3 * s per vehicle); `StopLDPV_l`/`StopHDV_l`
//! count vehicles standing still at `s` (ng/m3 per stopped vehicle).

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{
    write_ae51_csv, write_event_log, write_traffic_csv, write_weather_csv, BBox, BcSample, Detection,
    DetectionEvent, DetectionFrame, ObjectClass, StopInterval, TrafficDensitySample, WeatherKind, WeatherSample,
};
use crate::vision::{BinCounts, GrayImage};

pub const FRAME_WIDTH: usize = 640;
pub const FRAME_HEIGHT: usize = 360;
/// Vehicle speed while moving, px/s.
pub const SPEED: f64 = 25.0;
/// Minimum spacing between entries in one lane, s.
pub const HEADWAY: i64 = 3;
const ENTRY_X: f64 = 5.0;
const LANE_PITCH: f64 = 70.0;
const WEATHER_STEP: i64 = 300;
const FORECAST_STEP: i64 = 3600;
const TRAFFIC_STEP: i64 = 60;
/// ATN increment per ng/m3 per 30 s of sampling.
const ATN_PER_BC: f64 = 1e-5;
pub const BIN_SECONDS: i64 = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("bad scenario config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopWave {
    pub period: i64,
    /// Stationary seconds at the end of each period.
    pub dwell: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub dataset: String,
    /// UTC seconds of the first instrument cell.
    pub start: i64,
    pub duration: i64,
    pub lane_count: u32,
    /// Mean arrivals per lane, vehicles/min, before headway enforcement.
    pub arrival_rate: f64,
    pub hdv_fraction: f64,
    pub stop_wave: Option<StopWave>,
    /// Seconds by which BC trails the traffic that causes it.
    pub planted_lag: i64,
    /// Keyed by feature name, e.g. `HDV_1`; missing keys weigh 0.
    pub emission_weights: BTreeMap<String, f64>,
    pub background: f64,
    /// Coefficient `c` of the `1 + c * wind` divisor (wind in km/h).
    pub wind_dilution: Option<f64>,
    /// Per-reading noise, ng/m3.
    pub noise_sigma: f64,
    /// Instrument timebase, s.
    pub bc_step: i64,
    pub emit_frames: bool,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            dataset: "synthetic".into(),
            start: 1_730_743_200,
            duration: 7200,
            lane_count: 2,
            arrival_rate: 8.0,
            hdv_fraction: 0.05,
            stop_wave: Some(StopWave { period: 300, dwell: 30 }),
            planted_lag: 160,
            emission_weights: default_weights(2),
            background: 0.0,
            wind_dilution: None,
            noise_sigma: 60.0,
            bc_step: 30,
            emit_frames: true,
            seed: 0,
        }
    }
}

/// Lane 1 emits most; farther lanes are discounted by `1/l`.
pub fn default_weights(lanes: u32) -> BTreeMap<String, f64> {
    let mut w = BTreeMap::new();
    for l in 1..=lanes {
        let k = 1.0 / l as f64;
        w.insert(format!("LDPV_{l}"), 3000.0 * k);
        w.insert(format!("HDV_{l}"), 15000.0 * k);
        w.insert(format!("StopLDPV_{l}"), 150.0 * k);
        w.insert(format!("StopHDV_{l}"), 600.0 * k);
    }
    w
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::BadConfig(m));
        if self.duration <= 0 {
            return bad(format!("duration {}", self.duration));
        }
        if !(1..=4).contains(&self.lane_count) {
            return bad(format!("lane_count {} outside 1..=4", self.lane_count));
        }
        if !(self.arrival_rate >= 0.0 && self.arrival_rate.is_finite()) {
            return bad(format!("arrival_rate {}", self.arrival_rate));
        }
        if !(0.0..=1.0).contains(&self.hdv_fraction) {
            return bad(format!("hdv_fraction {}", self.hdv_fraction));
        }
        if 4 * self.planted_lag.abs() >= self.duration {
            return bad(format!("|planted_lag| {} must be below duration/4", self.planted_lag));
        }
        if self.bc_step <= 0 {
            return bad(format!("bc_step {}", self.bc_step));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma {}", self.noise_sigma));
        }
        if let Some(c) = self.wind_dilution {
            if !(c >= 0.0) {
                return bad(format!("wind_dilution {c}"));
            }
        }
        if let Some(w) = self.stop_wave {
            if w.period <= 0 || w.dwell <= 0 || w.dwell >= w.period {
                return bad(format!("stop wave {w:?}"));
            }
        }
        let known = crate::features::default_feature_names(self.lane_count as usize, false);
        for k in self.emission_weights.keys() {
            if !known.contains(k) || k == "TotalVehicle" || k.starts_with("his_") {
                return bad(format!("no planted feature named {k:?}"));
            }
        }
        Ok(())
    }

    pub fn end(&self) -> i64 {
        self.start + self.duration
    }

    /// Stop windows `[a, b)` intersecting the session.
    fn dwell_windows(&self) -> Vec<(i64, i64)> {
        let Some(w) = self.stop_wave else {
            return Vec::new();
        };
        (0..)
            .map(|k| self.start + k * w.period + w.period - w.dwell)
            .take_while(|&a| a < self.end())
            .map(|a| (a, a + w.dwell))
            .collect()
    }
}

/// Boundary rows of the lane frame, nearest the camera first.
pub fn lane_boundaries_y(lanes: u32) -> Vec<f64> {
    (0..=lanes)
        .map(|k| FRAME_HEIGHT as f64 - 20.0 - LANE_PITCH * k as f64)
        .collect()
}

pub fn lane_center_y(lane: u32) -> f64 {
    let b = lane_boundaries_y(lane);
    (b[lane as usize - 1] + b[lane as usize]) / 2.0
}

/// Everything recorded about the planted truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ScenarioConfig,
    pub planted_lag: i64,
    pub emission_weights: BTreeMap<String, f64>,
    pub lane_boundaries_y: Vec<f64>,
    pub n_vehicles: usize,
    pub bin_seconds: i64,
    /// Counts per bin in traffic time.
    pub counts: Vec<BinCounts>,
    pub stops: Vec<StopInterval>,
    /// Clean-signal variance over noise variance, dB; absent without noise.
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub events: Vec<DetectionEvent>,
    pub stops: Vec<StopInterval>,
    pub frames: Vec<DetectionFrame>,
    pub lane_image: GrayImage,
    pub weather: Vec<WeatherSample>,
    pub traffic: Vec<TrafficDensitySample>,
    pub bc: Vec<BcSample>,
    pub manifest: Manifest,
}

#[derive(Debug, Clone)]
struct Vehicle {
    id: u64,
    class: ObjectClass,
    lane: u32,
    entry: i64,
    /// Last second on screen.
    exit: i64,
    stops: Vec<(i64, i64)>,
}

impl Vehicle {
    /// Position at integer time `t` within `[entry, exit]`.
    fn x_at(&self, t: i64) -> f64 {
        let frozen: i64 = self.stops.iter().map(|&(a, b)| (t.min(b) - a).max(0)).sum();
        ENTRY_X + SPEED * (t - self.entry - frozen) as f64
    }
}

fn in_window(t: i64, windows: &[(i64, i64)]) -> Option<i64> {
    windows.iter().find(|&&(a, b)| t >= a && t < b).map(|&(_, b)| b)
}

fn round_to(v: f64, digits: i32) -> f64 {
    let p = 10f64.powi(digits);
    (v * p).round() / p
}

fn vehicles(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Vec<Vehicle> {
    let windows = cfg.dwell_windows();
    let mut out = Vec::new();
    let last_x = FRAME_WIDTH as f64 - ENTRY_X;
    for lane in 1..=cfg.lane_count {
        if cfg.arrival_rate <= 0.0 {
            continue;
        }
        let gap = Exp::new(cfg.arrival_rate / 60.0).expect("positive rate");
        let mut natural = cfg.start as f64;
        let mut prev: Option<i64> = None;
        loop {
            natural += gap.sample(rng);
            let mut e = natural.ceil() as i64;
            loop {
                if let Some(p) = prev {
                    e = e.max(p + HEADWAY);
                }
                match in_window(e, &windows) {
                    Some(b) => e = b,
                    None => break,
                }
            }
            if e >= cfg.end() {
                break;
            }
            prev = Some(e);
            natural = natural.max(e as f64);
            let class = if rng.random_bool(cfg.hdv_fraction) {
                ObjectClass::Truck
            } else {
                ObjectClass::Car
            };
            let mut v = Vehicle {
                id: 0,
                class,
                lane,
                entry: e,
                exit: e,
                stops: Vec::new(),
            };
            let mut t = e;
            loop {
                if let Some(&(a, b)) = windows.iter().find(|&&(a, _)| a == t) {
                    v.stops.push((a, b));
                    t = b;
                    continue;
                }
                if v.x_at(t + 1) > last_x {
                    break;
                }
                t += 1;
            }
            v.exit = t;
            out.push(v);
        }
    }
    out.sort_by_key(|v| (v.entry, v.lane));
    for (i, v) in out.iter_mut().enumerate() {
        v.id = i as u64;
    }
    out
}

fn weather(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Vec<WeatherSample> {
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let t0 = cfg.start - 3 * WEATHER_STEP;
    let t1 = cfg.end() + 3 * WEATHER_STEP;
    let mut out = Vec::new();
    let mut wind: f64 = 10.0;
    let mut t = t0;
    while t <= t1 {
        let phase = (t - cfg.start) as f64 / 86_400.0 * std::f64::consts::TAU;
        wind = (wind + 2.5 * noise.sample(rng)).clamp(0.0, 35.0);
        out.push(WeatherSample {
            timestamp: t,
            temperature: round_to(12.0 + 4.0 * phase.sin() + 0.2 * noise.sample(rng), 1),
            wind_speed: round_to(wind, 1),
            humidity: round_to((65.0 - 10.0 * phase.sin() + noise.sample(rng)).clamp(0.0, 100.0), 1),
            kind: WeatherKind::Historical,
        });
        t += WEATHER_STEP;
    }
    let hist = out.clone();
    let mut t = t0.div_euclid(FORECAST_STEP) * FORECAST_STEP;
    while t <= t1 {
        let h = &hist[nearest_weather(&hist, t)];
        out.push(WeatherSample {
            timestamp: t,
            temperature: round_to(h.temperature + noise.sample(rng), 1),
            wind_speed: round_to((h.wind_speed + 2.0 * noise.sample(rng)).max(0.0), 1),
            humidity: round_to((h.humidity + 3.0 * noise.sample(rng)).clamp(0.0, 100.0), 1),
            kind: WeatherKind::Forecast,
        });
        t += FORECAST_STEP;
    }
    out
}

/// Nearest historical sample on the regular grid, earlier on ties.
fn nearest_weather(hist: &[WeatherSample], t: i64) -> usize {
    let d = t - hist[0].timestamp;
    ((d + WEATHER_STEP / 2 - 1).div_euclid(WEATHER_STEP)).clamp(0, hist.len() as i64 - 1) as usize
}

fn lane_image(lanes: u32) -> GrayImage {
    let mut img = GrayImage::filled(FRAME_WIDTH, FRAME_HEIGHT, 40);
    for y in lane_boundaries_y(lanes) {
        let y = y as usize;
        for yy in y - 1..=y + 1 {
            for x in 0..FRAME_WIDTH {
                img.set(x, yy, 230);
            }
        }
    }
    img
}

fn frames(cfg: &ScenarioConfig, vs: &[Vehicle]) -> Vec<DetectionFrame> {
    let mut frames: Vec<DetectionFrame> = (cfg.start..cfg.end())
        .map(|t| DetectionFrame {
            t: t as f64,
            detections: Vec::new(),
        })
        .collect();
    for v in vs {
        let (w, h) = match v.class {
            ObjectClass::Truck => (70.0, 30.0),
            _ => (40.0, 20.0),
        };
        let y = lane_center_y(v.lane);
        for t in v.entry..=v.exit.min(cfg.end() - 1) {
            let x = v.x_at(t);
            frames[(t - cfg.start) as usize].detections.push(Detection {
                class: v.class,
                bbox: Some(BBox {
                    x: x - w / 2.0,
                    y: y - h / 2.0,
                    w,
                    h,
                }),
                centroid: None,
            });
        }
    }
    frames
}

/// Per-second emission in traffic time over `[start, end)`.
fn emission(cfg: &ScenarioConfig, vs: &[Vehicle]) -> Vec<f64> {
    let w = |name: String| cfg.emission_weights.get(&name).copied().unwrap_or(0.0);
    let mut e = vec![0.0; cfg.duration as usize];
    for v in vs {
        let hdv = v.class == ObjectClass::Truck;
        let (count_w, stop_w) = if hdv {
            (w(format!("HDV_{}", v.lane)), w(format!("StopHDV_{}", v.lane)))
        } else {
            (w(format!("LDPV_{}", v.lane)), w(format!("StopLDPV_{}", v.lane)))
        };
        e[(v.entry - cfg.start) as usize] += count_w;
        for &(a, b) in &v.stops {
            for s in a.max(cfg.start)..b.min(cfg.end()) {
                e[(s - cfg.start) as usize] += stop_w;
            }
        }
    }
    e
}

fn true_counts(cfg: &ScenarioConfig, vs: &[Vehicle], stops: &[StopInterval]) -> Vec<BinCounts> {
    let lanes = cfg.lane_count as usize;
    let origin = cfg.start.div_euclid(BIN_SECONDS) * BIN_SECONDS;
    let n = ((cfg.end() - origin + BIN_SECONDS - 1) / BIN_SECONDS) as usize;
    let mut out: Vec<BinCounts> = (0..n)
        .map(|k| BinCounts {
            bin_start: origin + k as i64 * BIN_SECONDS,
            total_vehicle: 0,
            ldpv: vec![0; lanes],
            hdv: vec![0; lanes],
            stop_ldpv: vec![0; lanes],
            stop_hdv: vec![0; lanes],
            unknown_lane: 0,
        })
        .collect();
    for v in vs {
        let b = &mut out[((v.entry - origin) / BIN_SECONDS) as usize];
        b.total_vehicle += 1;
        match v.class {
            ObjectClass::Truck => b.hdv[v.lane as usize - 1] += 1,
            _ => b.ldpv[v.lane as usize - 1] += 1,
        }
    }
    for s in stops {
        let l = s.lane.expect("planted stops have lanes") as usize - 1;
        for b in out.iter_mut() {
            let (b0, b1) = (b.bin_start as f64, (b.bin_start + BIN_SECONDS) as f64);
            if s.start < b1 && s.end > b0 {
                match s.object_class {
                    ObjectClass::Truck => b.stop_hdv[l] += 1,
                    _ => b.stop_ldpv[l] += 1,
                }
            }
        }
    }
    out
}

pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Scenario, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vs = vehicles(cfg, &mut rng);
    let weather = weather(cfg, &mut rng);

    let events: Vec<DetectionEvent> = vs
        .iter()
        .map(|v| DetectionEvent {
            object_class: v.class,
            lane: Some(v.lane),
            track_id: v.id,
            timestamp: v.entry,
            centroid: Some((ENTRY_X, lane_center_y(v.lane))),
            bbox: None,
        })
        .collect();
    let stops: Vec<StopInterval> = vs
        .iter()
        .flat_map(|v| {
            v.stops.iter().map(move |&(a, b)| StopInterval {
                track_id: v.id,
                object_class: v.class,
                lane: Some(v.lane),
                start: a as f64,
                end: b as f64,
            })
        })
        .collect();

    // Clean BC per second of observation time.
    let hist: Vec<WeatherSample> = weather
        .iter()
        .filter(|w| w.kind == WeatherKind::Historical)
        .cloned()
        .collect();
    let e = emission(cfg, &vs);
    let clean_at = |t: i64| {
        let s = t - cfg.planted_lag;
        let em = if s >= cfg.start && s < cfg.end() {
            e[(s - cfg.start) as usize]
        } else {
            0.0
        };
        let level = cfg.background + em;
        match cfg.wind_dilution {
            Some(c) => level / (1.0 + c * hist[nearest_weather(&hist, s)].wind_speed),
            None => level,
        }
    };
    let n_cells = (cfg.duration / cfg.bc_step) as usize;
    let clean: Vec<f64> = (0..n_cells)
        .map(|i| {
            let t0 = cfg.start + i as i64 * cfg.bc_step;
            (t0..t0 + cfg.bc_step).map(clean_at).sum::<f64>() / cfg.bc_step as f64
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("finite sigma");
    let mut atn = -3.41;
    let bc: Vec<BcSample> = clean
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let v = round_to(c + noise.sample(&mut rng), 3);
            if i > 0 {
                atn += ATN_PER_BC * v * cfg.bc_step as f64 / 30.0;
            }
            BcSample {
                timestamp: cfg.start + i as i64 * cfg.bc_step,
                ref_count: 890_665 + 120 * i as i64,
                sen_count: 921_559,
                atn: round_to(atn, 10),
                flow: 100.0,
                pcb_temp: 19.0,
                status: 0,
                battery: 98.0,
                bc_raw: (i > 0).then_some(v),
                ona_pts: None,
            }
        })
        .collect();
    let snr_db = (cfg.noise_sigma > 0.0).then(|| {
        let m = clean.iter().sum::<f64>() / clean.len() as f64;
        let var = clean.iter().map(|c| (c - m).powi(2)).sum::<f64>() / clean.len() as f64;
        10.0 * (var / cfg.noise_sigma.powi(2)).log10()
    });

    let traffic: Vec<TrafficDensitySample> = (cfg.start..cfg.end())
        .step_by(TRAFFIC_STEP as usize)
        .map(|t| {
            let recent = vs.iter().filter(|v| v.entry > t - 300 && v.entry <= t).count() as f64;
            let capacity = cfg.lane_count as f64 * 300.0 / HEADWAY as f64;
            let jitter: f64 = rng.random_range(-0.02..0.02);
            TrafficDensitySample {
                timestamp: t,
                ratio: round_to((recent / capacity + jitter).clamp(0.0, 1.0), 3),
            }
        })
        .collect();

    let frames = if cfg.emit_frames { frames(cfg, &vs) } else { Vec::new() };
    let manifest = Manifest {
        config: cfg.clone(),
        planted_lag: cfg.planted_lag,
        emission_weights: cfg.emission_weights.clone(),
        lane_boundaries_y: lane_boundaries_y(cfg.lane_count),
        n_vehicles: vs.len(),
        bin_seconds: BIN_SECONDS,
        counts: true_counts(cfg, &vs, &stops),
        stops: stops.clone(),
        snr_db,
    };
    Ok(Scenario {
        events,
        stops,
        frames,
        lane_image: lane_image(cfg.lane_count),
        weather,
        traffic,
        bc,
        manifest,
    })
}

/// File names written by [`write_scenario`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFiles {
    pub ae51: PathBuf,
    pub events: PathBuf,
    pub stops: PathBuf,
    pub detections: Option<PathBuf>,
    pub lane_image: PathBuf,
    pub weather: PathBuf,
    pub traffic: PathBuf,
    pub manifest: PathBuf,
}

pub fn write_scenario(sc: &Scenario, dir: &Path) -> io::Result<ScenarioFiles> {
    fs::create_dir_all(dir)?;
    let files = ScenarioFiles {
        ae51: dir.join("ae51.csv"),
        events: dir.join("events.log"),
        stops: dir.join("stops.json"),
        detections: (!sc.frames.is_empty()).then(|| dir.join("detections.json")),
        lane_image: dir.join("lane.pgm"),
        weather: dir.join("weather.csv"),
        traffic: dir.join("traffic.csv"),
        manifest: dir.join("manifest.json"),
    };
    fs::write(&files.ae51, write_ae51_csv(&sc.bc))?;
    fs::write(&files.events, write_event_log(&sc.events))?;
    fs::write(&files.stops, pretty(&sc.stops))?;
    if let Some(p) = &files.detections {
        fs::write(p, serde_json::to_string(&sc.frames).expect("frames serialize"))?;
    }
    fs::write(&files.lane_image, sc.lane_image.to_pgm())?;
    fs::write(&files.weather, write_weather_csv(&sc.weather))?;
    fs::write(&files.traffic, write_traffic_csv(&sc.traffic))?;
    fs::write(&files.manifest, pretty(&sc.manifest))?;
    Ok(files)
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}
