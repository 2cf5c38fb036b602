use serde::{Deserialize, Serialize};

use super::lanes::{assign_lane, LaneGeometry};
use super::VisionError;
use crate::ingest::{Detection, DetectionEvent, DetectionFrame, ObjectClass, StopInterval};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    /// Association gate in pixels.
    pub gate: f64,
    /// Seconds without a detection before a track is closed.
    pub max_age: f64,
    /// Below this speed (px/s) a vehicle counts as stationary.
    pub speed_eps: f64,
    /// Minimum stationary duration (s) for a stop.
    pub min_stop: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            gate: 40.0,
            max_age: 2.0,
            speed_eps: 2.0,
            min_stop: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackState {
    Moving,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: u64,
    pub object_class: ObjectClass,
    /// `(t, centroid)` in arrival order.
    pub history: Vec<(f64, (f64, f64))>,
    pub state: TrackState,
    pub stop_intervals: Vec<(f64, f64)>,
}

impl Track {
    pub fn first_seen(&self) -> f64 {
        self.history[0].0
    }

    pub fn last_seen(&self) -> f64 {
        self.history[self.history.len() - 1].0
    }

    pub fn last_position(&self) -> (f64, f64) {
        self.history[self.history.len() - 1].1
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrackerState {
    pub active: Vec<Track>,
    pub closed: Vec<Track>,
    pub next_id: u64,
    pub last_time: Option<f64>,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Advances the tracker by one frame. Detections are matched to active
/// tracks of the same class by greedy nearest-centroid association within
/// the gate; leftovers start new tracks.
pub fn update_tracks(
    state: &mut TrackerState,
    t: f64,
    detections: &[Detection],
    cfg: &TrackerConfig,
) -> Result<(), VisionError> {
    if let Some(prev) = state.last_time {
        if t < prev {
            return Err(VisionError::OutOfOrderFrame { t, previous: prev });
        }
    }
    state.last_time = Some(t);

    let (stale, live): (Vec<Track>, Vec<Track>) = std::mem::take(&mut state.active)
        .into_iter()
        .partition(|tr| t - tr.last_seen() > cfg.max_age);
    state.active = live;
    for tr in stale {
        close(state, tr, cfg);
    }

    let dets: Vec<(ObjectClass, (f64, f64))> = detections
        .iter()
        .filter_map(|d| d.position().map(|p| (d.class, p)))
        .collect();
    let mut pairs = Vec::new();
    for (ti, tr) in state.active.iter().enumerate() {
        for (di, (class, p)) in dets.iter().enumerate() {
            let d = dist(tr.last_position(), *p);
            if *class == tr.object_class && d <= cfg.gate {
                pairs.push((d, ti, di));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut track_used = vec![false; state.active.len()];
    let mut det_used = vec![false; dets.len()];
    for (_, ti, di) in pairs {
        if track_used[ti] || det_used[di] {
            continue;
        }
        track_used[ti] = true;
        det_used[di] = true;
        state.active[ti].history.push((t, dets[di].1));
    }
    for (di, (class, p)) in dets.iter().enumerate() {
        if det_used[di] {
            continue;
        }
        state.active.push(Track {
            track_id: state.next_id,
            object_class: *class,
            history: vec![(t, *p)],
            state: TrackState::Moving,
            stop_intervals: Vec::new(),
        });
        state.next_id += 1;
    }
    for tr in &mut state.active {
        let (s, iv) = classify_stop(tr, cfg.speed_eps, cfg.min_stop);
        tr.state = s;
        tr.stop_intervals = iv;
    }
    Ok(())
}

fn close(state: &mut TrackerState, mut tr: Track, cfg: &TrackerConfig) {
    let (s, iv) = classify_stop(&tr, cfg.speed_eps, cfg.min_stop);
    tr.state = s;
    tr.stop_intervals = iv;
    state.closed.push(tr);
}

/// Closes every track and returns all of them ordered by id.
pub fn finish_tracks(mut state: TrackerState, cfg: &TrackerConfig) -> Vec<Track> {
    for tr in std::mem::take(&mut state.active) {
        close(&mut state, tr, cfg);
    }
    let mut all = state.closed;
    all.sort_by_key(|t| t.track_id);
    all
}

pub fn track_frames(frames: &[DetectionFrame], cfg: &TrackerConfig) -> Result<Vec<Track>, VisionError> {
    let mut state = TrackerState::default();
    for f in frames {
        update_tracks(&mut state, f.t, &f.detections, cfg)?;
    }
    Ok(finish_tracks(state, cfg))
}

/// Stop intervals are maximal runs of consecutive history segments slower
/// than `speed_eps` lasting at least `min_duration`. The track is `Stopped`
/// when such a run reaches its latest observation.
pub fn classify_stop(track: &Track, speed_eps: f64, min_duration: f64) -> (TrackState, Vec<(f64, f64)>) {
    let h = &track.history;
    let mut intervals = Vec::new();
    let mut run_start: Option<f64> = None;
    let mut state = TrackState::Moving;
    for (i, w) in h.windows(2).enumerate() {
        let (t0, p0) = w[0];
        let (t1, p1) = w[1];
        let dt = t1 - t0;
        let slow = dt > 0.0 && dist(p0, p1) / dt < speed_eps;
        if slow {
            run_start.get_or_insert(t0);
        }
        let run_ends = !slow || i + 2 == h.len();
        if let (true, Some(s)) = (run_ends, run_start) {
            let e = if slow { t1 } else { t0 };
            if e - s >= min_duration {
                intervals.push((s, e));
                if slow {
                    state = TrackState::Stopped;
                }
            }
            run_start = None;
        }
    }
    (state, intervals)
}

/// First-sighting events plus stop intervals, lanes taken from the first
/// centroid.
pub fn tracks_to_events(
    tracks: &[Track],
    geom: Option<&LaneGeometry>,
) -> (Vec<DetectionEvent>, Vec<StopInterval>) {
    let mut events = Vec::new();
    let mut stops = Vec::new();
    for tr in tracks {
        let p = tr.history[0].1;
        let lane = geom.and_then(|g| assign_lane(p, g));
        events.push(DetectionEvent {
            object_class: tr.object_class,
            lane,
            track_id: tr.track_id,
            timestamp: tr.first_seen().floor() as i64,
            centroid: Some(p),
            bbox: None,
        });
        for &(start, end) in &tr.stop_intervals {
            stops.push(StopInterval {
                track_id: tr.track_id,
                object_class: tr.object_class,
                lane,
                start,
                end,
            });
        }
    }
    (events, stops)
}
