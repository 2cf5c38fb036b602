use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::image::{gaussian_blur, GrayImage};
use super::VisionError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CannyConfig {
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
}

impl Default for CannyConfig {
    fn default() -> Self {
        Self {
            sigma: 1.4,
            low: 40.0,
            high: 100.0,
        }
    }
}

/// Sobel gradients of a float raster with clamp-to-edge borders.
pub(crate) fn sobel(src: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |x: i64, y: i64| {
        let x = x.clamp(0, w as i64 - 1) as usize;
        let y = y.clamp(0, h as i64 - 1) as usize;
        src[y * w + x]
    };
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            gx[i] = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            gy[i] = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        }
    }
    (gx, gy)
}

/// Neighbour offset along the quantized gradient direction.
pub(crate) fn direction_offset(gx: f64, gy: f64) -> (i64, i64) {
    let mut a = gy.atan2(gx).to_degrees();
    if a < 0.0 {
        a += 180.0;
    }
    if !(22.5..157.5).contains(&a) {
        (1, 0)
    } else if a < 67.5 {
        (1, 1)
    } else if a < 112.5 {
        (0, 1)
    } else {
        (-1, 1)
    }
}

/// Canny edge detector: Gaussian smoothing, Sobel gradients, non-maximum
/// suppression along the gradient, and double-threshold hysteresis. Output
/// pixels are 0 or 255; the one-pixel border is never an edge.
///
/// Along a plateau of equal magnitude only the first pixel (in the negative
/// gradient direction) survives suppression, so ideal steps give one-pixel
/// lines.
pub fn canny(img: &GrayImage, cfg: &CannyConfig) -> Result<GrayImage, VisionError> {
    if !(cfg.low >= 0.0 && cfg.low <= cfg.high) {
        return Err(VisionError::BadThresholds {
            low: cfg.low,
            high: cfg.high,
        });
    }
    let (w, h) = (img.width, img.height);
    let smooth = gaussian_blur(img, cfg.sigma);
    let (gx, gy) = sobel(&smooth, w, h);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();

    let mut thin = vec![0.0; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let (dx, dy) = direction_offset(gx[i], gy[i]);
            let fwd = mag[(y as i64 + dy) as usize * w + (x as i64 + dx) as usize];
            let back = mag[(y as i64 - dy) as usize * w + (x as i64 - dx) as usize];
            if m > back && m >= fwd {
                thin[i] = m;
            }
        }
    }

    let mut out = GrayImage::new(w, h);
    let mut queue = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= cfg.high {
            out.pixels[i] = 255;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out.pixels[j] == 0 && thin[j] >= cfg.low && thin[j] > 0.0 {
                    out.pixels[j] = 255;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_no_edges() {
        let e = canny(&GrayImage::filled(32, 24, 120), &CannyConfig::default()).unwrap();
        assert_eq!(e.count_nonzero(), 0);
    }

    #[test]
    fn bad_thresholds() {
        let cfg = CannyConfig {
            low: 10.0,
            high: 5.0,
            ..Default::default()
        };
        assert!(matches!(
            canny(&GrayImage::new(4, 4), &cfg),
            Err(VisionError::BadThresholds { .. })
        ));
    }

    #[test]
    fn step_edge_is_one_pixel_wide() {
        let (w, h) = (40, 30);
        let mut img = GrayImage::new(w, h);
        for y in 0..h {
            for x in 20..w {
                img.set(x, y, 200);
            }
        }
        let e = canny(&img, &CannyConfig::default()).unwrap();
        for y in 1..h - 1 {
            let cols: Vec<usize> = (0..w).filter(|&x| e.get(x, y) != 0).collect();
            assert_eq!(cols.len(), 1, "row {y}: {cols:?}");
            assert!(cols[0] == 19 || cols[0] == 20);
        }
    }

    /// Direct per-pixel recomputation: explicit Sobel sums, suppression and
    /// hysteresis as a fixed point over the whole image.
    fn oracle(img: &GrayImage, low: f64, high: f64) -> Vec<bool> {
        let (w, h) = (img.width as i64, img.height as i64);
        let p = |x: i64, y: i64| img.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize) as f64;
        const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let grad = |x: i64, y: i64| {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..3 {
                for i in 0..3 {
                    gx += KX[j][i] * p(x + i as i64 - 1, y + j as i64 - 1);
                    gy += KX[i][j] * p(x + i as i64 - 1, y + j as i64 - 1);
                }
            }
            (gx, gy)
        };
        let mag = |x: i64, y: i64| {
            let (a, b) = grad(x, y);
            a.hypot(b)
        };
        let mut cand = vec![0.0; (w * h) as usize];
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let (gx, gy) = grad(x, y);
                let m = gx.hypot(gy);
                if m == 0.0 {
                    continue;
                }
                let deg = {
                    let a = gy.atan2(gx).to_degrees();
                    if a < 0.0 { a + 180.0 } else { a }
                };
                let (dx, dy) = if deg < 22.5 || deg >= 157.5 {
                    (1, 0)
                } else if deg < 67.5 {
                    (1, 1)
                } else if deg < 112.5 {
                    (0, 1)
                } else {
                    (-1, 1)
                };
                if m > mag(x - dx, y - dy) && m >= mag(x + dx, y + dy) {
                    cand[(y * w + x) as usize] = m;
                }
            }
        }
        let mut on: Vec<bool> = cand.iter().map(|&m| m >= high).collect();
        loop {
            let mut changed = false;
            for y in 0..h {
                for x in 0..w {
                    let i = (y * w + x) as usize;
                    if on[i] || cand[i] < low || cand[i] == 0.0 {
                        continue;
                    }
                    let near = (-1..=1).any(|dy| {
                        (-1..=1).any(|dx| {
                            let (nx, ny) = (x + dx, y + dy);
                            nx >= 0 && ny >= 0 && nx < w && ny < h && on[(ny * w + nx) as usize]
                        })
                    });
                    if near {
                        on[i] = true;
                        changed = true;
                    }
                }
            }
            if !changed {
                return on;
            }
        }
    }

    #[test]
    fn two_rectangles_match_oracle() {
        let mut img = GrayImage::filled(60, 50, 30);
        for y in 8..25 {
            for x in 5..30 {
                img.set(x, y, 180);
            }
        }
        for y in 20..44 {
            for x in 25..52 {
                img.set(x, y, 110);
            }
        }
        let cfg = CannyConfig {
            sigma: 0.0,
            low: 100.0,
            high: 300.0,
        };
        let e = canny(&img, &cfg).unwrap();
        let o = oracle(&img, cfg.low, cfg.high);
        assert!(e.count_nonzero() > 100);
        for (i, &on) in o.iter().enumerate() {
            assert_eq!(e.pixels[i] != 0, on, "pixel {i}");
        }
    }
}
