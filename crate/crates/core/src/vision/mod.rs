//! Lane geometry, vehicle tracking and per-bin vehicle counts.

pub mod canny;
pub mod counts;
pub mod hough;
pub mod image;
pub mod lanes;
pub mod track;

pub use canny::{canny, CannyConfig};
pub use counts::{activity_from_events, bin_counts, BinCounts, BinSpec};
pub use hough::{hough_lines, HoughConfig, Line};
pub use image::GrayImage;
pub use lanes::{assign_lane, select_lane_lines, LaneGeometry, LaneSelectConfig};
pub use track::{classify_stop, track_frames, tracks_to_events, update_tracks, Track, TrackState, TrackerConfig, TrackerState};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("invalid Canny thresholds: low {low}, high {high}")]
    BadThresholds { low: f64, high: f64 },
    #[error("need at least two lane boundaries, found {found}")]
    InsufficientLines { found: usize },
    #[error("frame at t={t} precedes t={previous}")]
    OutOfOrderFrame { t: f64, previous: f64 },
    #[error("image: {0}")]
    BadImage(String),
    #[error("config: {0}")]
    BadConfig(String),
}

/// Lane geometry from a set of road frames: candidate lines from every
/// frame are pooled before selection.
pub fn detect_lanes(
    frames: &[GrayImage],
    canny_cfg: &CannyConfig,
    hough_cfg: &HoughConfig,
    lane_cfg: &LaneSelectConfig,
) -> Result<LaneGeometry, VisionError> {
    let first = frames
        .first()
        .ok_or_else(|| VisionError::BadImage("no frames".into()))?;
    let mut lines = Vec::new();
    for f in frames {
        let edges = canny(f, canny_cfg)?;
        lines.extend(hough_lines(&edges, hough_cfg)?);
    }
    select_lane_lines(&lines, first.width, first.height, lane_cfg)
}
