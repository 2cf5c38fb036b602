use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::image::GrayImage;
use super::VisionError;

/// Line in normal form: `x cos(theta) + y sin(theta) = rho`, theta in [0, pi).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub rho: f64,
    pub theta: f64,
    pub votes: u32,
}

impl Line {
    pub fn normal(&self) -> (f64, f64) {
        (self.theta.cos(), self.theta.sin())
    }

    /// Signed offset of a point from the line along its normal.
    pub fn offset(&self, p: (f64, f64)) -> f64 {
        let (c, s) = self.normal();
        p.0 * c + p.1 * s - self.rho
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoughConfig {
    pub rho_res: f64,
    pub theta_res: f64,
    pub vote_threshold: u32,
}

impl Default for HoughConfig {
    fn default() -> Self {
        Self {
            rho_res: 1.0,
            theta_res: PI / 180.0,
            vote_threshold: 150,
        }
    }
}

/// Vote accumulator over (theta, rho) bins.
pub struct Accumulator {
    pub n_theta: usize,
    pub n_rho: usize,
    pub rho_max: f64,
    pub rho_res: f64,
    pub theta_res: f64,
    pub votes: Vec<u32>,
}

impl Accumulator {
    pub fn theta_of(&self, j: usize) -> f64 {
        j as f64 * self.theta_res
    }

    pub fn rho_of(&self, r: usize) -> f64 {
        r as f64 * self.rho_res - self.rho_max
    }

    pub fn rho_index(&self, rho: f64) -> usize {
        (((rho + self.rho_max) / self.rho_res).round() as usize).min(self.n_rho - 1)
    }

    #[inline]
    fn at(&self, j: usize, r: usize) -> u32 {
        self.votes[j * self.n_rho + r]
    }

    /// Neighbour cell, wrapping theta across pi with rho mirrored.
    fn neighbour(&self, j: usize, r: usize, dj: i64, dr: i64) -> Option<(usize, usize)> {
        let mut nj = j as i64 + dj;
        let mut nr = r as i64 + dr;
        if nj < 0 || nj >= self.n_theta as i64 {
            nj = nj.rem_euclid(self.n_theta as i64);
            nr = self.n_rho as i64 - 1 - nr;
        }
        (nr >= 0 && nr < self.n_rho as i64).then_some((nj as usize, nr as usize))
    }
}

pub fn accumulate(edges: &GrayImage, cfg: &HoughConfig) -> Result<Accumulator, VisionError> {
    if !(cfg.rho_res > 0.0 && cfg.theta_res > 0.0 && cfg.theta_res < PI) {
        return Err(VisionError::BadConfig(format!(
            "hough resolution rho={} theta={}",
            cfg.rho_res, cfg.theta_res
        )));
    }
    let n_theta = (PI / cfg.theta_res).round() as usize;
    let rho_max = ((edges.width * edges.width + edges.height * edges.height) as f64).sqrt();
    let n_rho = (2.0 * rho_max / cfg.rho_res).ceil() as usize + 1;
    let trig: Vec<(f64, f64)> = (0..n_theta)
        .map(|j| {
            let t = j as f64 * cfg.theta_res;
            (t.cos(), t.sin())
        })
        .collect();
    let mut acc = Accumulator {
        n_theta,
        n_rho,
        rho_max,
        rho_res: cfg.rho_res,
        theta_res: cfg.theta_res,
        votes: vec![0; n_theta * n_rho],
    };
    for y in 0..edges.height {
        for x in 0..edges.width {
            if edges.get(x, y) == 0 {
                continue;
            }
            for (j, (c, s)) in trig.iter().enumerate() {
                let r = acc.rho_index(x as f64 * c + y as f64 * s);
                acc.votes[j * n_rho + r] += 1;
            }
        }
    }
    Ok(acc)
}

/// Standard Hough transform. Returns accumulator local maxima with at
/// least `vote_threshold` votes, strongest first (ties by theta then rho).
/// Plateaus yield a single peak, the first cell in scan order.
pub fn hough_lines(edges: &GrayImage, cfg: &HoughConfig) -> Result<Vec<Line>, VisionError> {
    let acc = accumulate(edges, cfg)?;
    let mut lines = Vec::new();
    for j in 0..acc.n_theta {
        for r in 0..acc.n_rho {
            let v = acc.at(j, r);
            if v < cfg.vote_threshold || v == 0 {
                continue;
            }
            let mut peak = true;
            'nb: for dj in -1..=1i64 {
                for dr in -1..=1i64 {
                    if dj == 0 && dr == 0 {
                        continue;
                    }
                    if let Some((nj, nr)) = acc.neighbour(j, r, dj, dr) {
                        let nv = acc.at(nj, nr);
                        let earlier = (nj, nr) < (j, r);
                        if nv > v || (earlier && nv == v) {
                            peak = false;
                            break 'nb;
                        }
                    }
                }
            }
            if peak {
                lines.push(Line {
                    rho: acc.rho_of(r),
                    theta: acc.theta_of(j),
                    votes: v,
                });
            }
        }
    }
    lines.sort_by(|a, b| {
        b.votes
            .cmp(&a.votes)
            .then(a.theta.total_cmp(&b.theta))
            .then(a.rho.total_cmp(&b.rho))
    });
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_image_has_no_lines() {
        let cfg = HoughConfig {
            vote_threshold: 1,
            ..Default::default()
        };
        assert!(hough_lines(&GrayImage::new(20, 20), &cfg).unwrap().is_empty());
    }

    #[test]
    fn horizontal_and_vertical() {
        let mut img = GrayImage::new(50, 40);
        for x in 0..50 {
            img.set(x, 12, 255);
        }
        for y in 0..40 {
            img.set(30, y, 255);
        }
        let cfg = HoughConfig {
            vote_threshold: 30,
            ..Default::default()
        };
        let lines = hough_lines(&img, &cfg).unwrap();
        assert_eq!(lines.len(), 2, "{lines:?}");
        let horiz = lines.iter().find(|l| (l.theta - PI / 2.0).abs() < 1e-9).unwrap();
        assert!((horiz.rho - 12.0).abs() < 1.0);
        assert!(horiz.votes >= 50);
        let vert = lines.iter().find(|l| l.theta.abs() < 1e-9).unwrap();
        assert!((vert.rho - 30.0).abs() < 1.0);
    }

    #[test]
    fn sorted_by_votes() {
        let mut img = GrayImage::new(60, 60);
        for x in 0..60 {
            img.set(x, 5, 255);
        }
        for x in 0..30 {
            img.set(x, 40, 255);
        }
        let cfg = HoughConfig {
            vote_threshold: 25,
            ..Default::default()
        };
        let lines = hough_lines(&img, &cfg).unwrap();
        assert!(lines.len() >= 2);
        assert!(lines.windows(2).all(|w| w[0].votes >= w[1].votes));
        assert!((lines[0].rho - 5.0).abs() < 1.0);
    }
}
