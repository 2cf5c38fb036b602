use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::VisionError;
use crate::align::ActivitySeries;
use crate::ingest::{DetectionEvent, StopInterval, VehicleClass};

/// Regular time bins `[origin + k*width, origin + (k+1)*width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinSpec {
    pub origin: i64,
    pub width: i64,
    pub n_bins: usize,
}

impl BinSpec {
    /// Bins aligned to multiples of `width` that cover `[t0, t1)`.
    pub fn covering(t0: i64, t1: i64, width: i64) -> Self {
        let origin = t0.div_euclid(width) * width;
        let n_bins = if t1 <= origin {
            0
        } else {
            ((t1 - origin + width - 1) / width) as usize
        };
        Self {
            origin,
            width,
            n_bins,
        }
    }

    pub fn index_of(&self, t: f64) -> Option<usize> {
        let k = ((t - self.origin as f64) / self.width as f64).floor();
        (k >= 0.0 && (k as usize) < self.n_bins).then_some(k as usize)
    }

    pub fn start_of(&self, k: usize) -> i64 {
        self.origin + k as i64 * self.width
    }
}

/// Vehicle counts in one bin. Per-lane vectors are indexed by lane - 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinCounts {
    pub bin_start: i64,
    pub total_vehicle: u32,
    pub ldpv: Vec<u32>,
    pub hdv: Vec<u32>,
    pub stop_ldpv: Vec<u32>,
    pub stop_hdv: Vec<u32>,
    /// Vehicles with no usable lane; excluded from the lane and total counts.
    pub unknown_lane: u32,
}

impl BinCounts {
    fn empty(bin_start: i64, lanes: usize) -> Self {
        Self {
            bin_start,
            total_vehicle: 0,
            ldpv: vec![0; lanes],
            hdv: vec![0; lanes],
            stop_ldpv: vec![0; lanes],
            stop_hdv: vec![0; lanes],
            unknown_lane: 0,
        }
    }
}

fn lane_slot(lane: Option<u32>, lanes: usize) -> Option<usize> {
    lane.filter(|&l| l >= 1 && l as usize <= lanes).map(|l| l as usize - 1)
}

/// Counts each vehicle once, in the bin of its first sighting. Stop counts
/// tally vehicles with a stop interval overlapping the bin. Non-vehicle
/// classes are ignored.
pub fn bin_counts(
    events: &[DetectionEvent],
    stops: &[StopInterval],
    spec: &BinSpec,
    lanes: usize,
) -> Result<Vec<BinCounts>, VisionError> {
    if spec.width <= 0 {
        return Err(VisionError::BadConfig(format!("bin width {}", spec.width)));
    }
    let mut bins: Vec<BinCounts> = (0..spec.n_bins)
        .map(|k| BinCounts::empty(spec.start_of(k), lanes))
        .collect();
    let mut seen = BTreeSet::new();
    for e in events {
        let Some(vc) = e.object_class.vehicle_class() else {
            continue;
        };
        if !seen.insert(e.track_id) {
            continue;
        }
        let Some(k) = spec.index_of(e.timestamp as f64) else {
            continue;
        };
        let b = &mut bins[k];
        match lane_slot(e.lane, lanes) {
            Some(l) => {
                b.total_vehicle += 1;
                match vc {
                    VehicleClass::Ldpv => b.ldpv[l] += 1,
                    VehicleClass::Hdv => b.hdv[l] += 1,
                }
            }
            None => b.unknown_lane += 1,
        }
    }
    let mut counted = BTreeSet::new();
    for s in stops {
        let (Some(vc), Some(l)) = (s.object_class.vehicle_class(), lane_slot(s.lane, lanes)) else {
            continue;
        };
        for (k, b) in bins.iter_mut().enumerate() {
            let (b0, b1) = (b.bin_start as f64, (b.bin_start + spec.width) as f64);
            if s.start < b1 && s.end > b0 && counted.insert((s.track_id, k)) {
                match vc {
                    VehicleClass::Ldpv => b.stop_ldpv[l] += 1,
                    VehicleClass::Hdv => b.stop_hdv[l] += 1,
                }
            }
        }
    }
    Ok(bins)
}

/// Vehicles first seen in each `step`-second interval of `[t0, t1)`,
/// regardless of lane.
pub fn activity_from_events(events: &[DetectionEvent], t0: i64, t1: i64, step: i64) -> ActivitySeries {
    let n = ((t1 - t0).max(0) + step - 1) / step;
    let mut values = vec![0.0; n as usize];
    let mut seen = BTreeSet::new();
    for e in events {
        if e.object_class.vehicle_class().is_none() || !seen.insert(e.track_id) {
            continue;
        }
        if e.timestamp >= t0 && e.timestamp < t1 {
            values[((e.timestamp - t0) / step) as usize] += 1.0;
        }
    }
    ActivitySeries {
        start: t0,
        step,
        values,
    }
}
