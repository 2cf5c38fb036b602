use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::hough::Line;
use super::VisionError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneSelectConfig {
    /// Expected boundary orientation (normal angle); pi/2 is horizontal.
    pub theta_center: f64,
    pub theta_tolerance: f64,
    /// Lines closer than this in rho are one boundary.
    pub min_separation: f64,
}

impl Default for LaneSelectConfig {
    fn default() -> Self {
        Self {
            theta_center: PI / 2.0,
            theta_tolerance: 20f64.to_radians(),
            min_separation: 15.0,
        }
    }
}

/// Ordered lane boundaries, nearest the camera (image bottom) first.
/// Lane `k` lies between boundaries `k-1` and `k` (0-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneGeometry {
    pub width: usize,
    pub height: usize,
    pub boundaries: Vec<Line>,
}

fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

impl LaneGeometry {
    pub fn lane_count(&self) -> u32 {
        self.boundaries.len().saturating_sub(1) as u32
    }

    fn bottom_anchor(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64)
    }

    /// Distance from the bottom-centre of the frame to the line.
    fn bottom_distance(&self, l: &Line) -> f64 {
        l.offset(self.bottom_anchor()).abs()
    }

    /// Offset of `p` from boundary `i`, positive on the camera side.
    fn camera_side(&self, i: usize, p: (f64, f64)) -> f64 {
        let l = &self.boundaries[i];
        let sign = if l.offset(self.bottom_anchor()) >= 0.0 {
            1.0
        } else {
            -1.0
        };
        sign * l.offset(p)
    }
}

/// Keep lines near the expected orientation, merge those within
/// `min_separation` in rho (single link, strongest line represents the
/// cluster) and order the survivors by distance from the image bottom.
pub fn select_lane_lines(
    lines: &[Line],
    width: usize,
    height: usize,
    cfg: &LaneSelectConfig,
) -> Result<LaneGeometry, VisionError> {
    let mut kept: Vec<Line> = lines
        .iter()
        .filter(|l| angle_gap(l.theta, cfg.theta_center) <= cfg.theta_tolerance)
        .copied()
        .collect();
    kept.sort_by(|a, b| a.rho.total_cmp(&b.rho));
    let mut reps: Vec<Line> = Vec::new();
    let mut last_rho = f64::NEG_INFINITY;
    for l in kept {
        match reps.last_mut() {
            Some(rep) if l.rho - last_rho <= cfg.min_separation => {
                if l.votes > rep.votes {
                    *rep = l;
                }
            }
            _ => reps.push(l),
        }
        last_rho = l.rho;
    }
    if reps.len() < 2 {
        return Err(VisionError::InsufficientLines { found: reps.len() });
    }
    let mut geom = LaneGeometry {
        width,
        height,
        boundaries: reps,
    };
    let mut b = std::mem::take(&mut geom.boundaries);
    b.sort_by(|x, y| geom.bottom_distance(x).total_cmp(&geom.bottom_distance(y)));
    geom.boundaries = b;
    Ok(geom)
}

/// 1-based lane index of a centroid, or `None` outside all lanes. A point
/// exactly on a shared boundary belongs to the lane nearer the camera.
pub fn assign_lane(p: (f64, f64), geom: &LaneGeometry) -> Option<u32> {
    (0..geom.boundaries.len().saturating_sub(1))
        .find(|&k| geom.camera_side(k, p) <= 0.0 && geom.camera_side(k + 1, p) >= 0.0)
        .map(|k| k as u32 + 1)
}
