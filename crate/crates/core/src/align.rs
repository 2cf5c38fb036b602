//! Lag estimation between the BC series and vehicle activity by maximizing
//! the cosine similarity of their DFT representations over candidate shifts.
//!
//! For a candidate shift `d` the activity spectrum is phase-rotated to the
//! spectrum of `y[n - d]` (circular), and the similarity with the BC spectrum
//! is taken componentwise over the cosine and sine parts. All candidates are
//! evaluated at once: the similarity numerator for every circular lag is the
//! unnormalized inverse DFT of `X[k] * conj(Y[k])`.

use num_traits::Float;
use rustfft::num_complex::Complex;
use rustfft::{FftNum, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::BcSeries;
use crate::scalar::Scalar;
use crate::stats;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("empty signal")]
    EmptyInput,
    #[error("spectra have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("spectrum has zero norm")]
    ZeroNorm,
    #[error("common interval of {overlap} s is shorter than the required {needed} s")]
    InsufficientOverlap { overlap: i64, needed: i64 },
    #[error("shift of {shift} s is not shorter than the series ({duration} s)")]
    ShiftTooLarge { shift: i64, duration: i64 },
    #[error("invalid candidate shifts: {0}")]
    BadCandidates(String),
}

/// Real and imaginary parts of a DFT, stored as separate cosine and sine
/// components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum<T> {
    /// `Σ x[n] cos(2πkn/N)`
    pub cos_part: Vec<T>,
    /// `-Σ x[n] sin(2πkn/N)`
    pub sin_part: Vec<T>,
}

impl<T: Scalar> Spectrum<T> {
    pub fn len(&self) -> usize {
        self.cos_part.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cos_part.is_empty()
    }

    pub fn energy(&self) -> T {
        self.cos_part
            .iter()
            .zip(&self.sin_part)
            .map(|(&c, &s)| c * c + s * s)
            .sum()
    }

    fn from_complex(v: &[Complex<T>]) -> Self {
        Self {
            cos_part: v.iter().map(|c| c.re).collect(),
            sin_part: v.iter().map(|c| c.im).collect(),
        }
    }

    fn to_complex(&self) -> Vec<Complex<T>> {
        self.cos_part
            .iter()
            .zip(&self.sin_part)
            .map(|(&re, &im)| Complex::new(re, im))
            .collect()
    }
}

fn fft_in_place<T: Scalar + FftNum>(buf: &mut [Complex<T>], inverse: bool) {
    let mut planner = FftPlanner::new();
    let plan = if inverse {
        planner.plan_fft_inverse(buf.len())
    } else {
        planner.plan_fft_forward(buf.len())
    };
    plan.process(buf);
}

pub fn dft<T: Scalar + FftNum>(x: &[T]) -> Result<Spectrum<T>, AlignError> {
    if x.is_empty() {
        return Err(AlignError::EmptyInput);
    }
    let mut buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
    fft_in_place(&mut buf, false);
    Ok(Spectrum::from_complex(&buf))
}

/// `(<Xc,Yc> + <Xs,Ys>) / (sqrt(|Xc|² + |Xs|²) sqrt(|Yc|² + |Ys|²))`
pub fn phase_cosine_similarity<T: Scalar>(x: &Spectrum<T>, y: &Spectrum<T>) -> Result<T, AlignError> {
    if x.len() != y.len() {
        return Err(AlignError::LengthMismatch(x.len(), y.len()));
    }
    let dot: T = x
        .cos_part
        .iter()
        .zip(&y.cos_part)
        .map(|(&a, &b)| a * b)
        .sum::<T>()
        + x.sin_part
            .iter()
            .zip(&y.sin_part)
            .map(|(&a, &b)| a * b)
            .sum::<T>();
    let nx = x.energy().sqrt();
    let ny = y.energy().sqrt();
    if nx == T::zero() || ny == T::zero() {
        return Err(AlignError::ZeroNorm);
    }
    Ok(dot / (nx * ny))
}

/// Spectrum of the circularly delayed signal `y[n - shift]`.
pub fn shift_spectrum<T: Scalar>(y: &Spectrum<T>, shift: i64) -> Spectrum<T> {
    let n = y.len() as i64;
    let two_pi = T::of(std::f64::consts::TAU);
    let mut out = y.clone();
    for k in 0..y.len() {
        // Reduce k * shift modulo N before forming the angle.
        let m = ((k as i64 % n) * shift.rem_euclid(n)).rem_euclid(n);
        let phi = two_pi * T::of_usize(m as usize) / T::of_usize(n as usize);
        let (s, c) = (Float::sin(phi), Float::cos(phi));
        let (a, b) = (y.cos_part[k], y.sin_part[k]);
        out.cos_part[k] = a * c + b * s;
        out.sin_part[k] = b * c - a * s;
    }
    out
}

/// Similarity between `X` and the spectrum of `y[n - d]` for every circular
/// lag `d` in `0..N`.
pub fn circular_similarity<T: Scalar + FftNum>(x: &[T], y: &[T]) -> Result<Vec<T>, AlignError> {
    if x.len() != y.len() {
        return Err(AlignError::LengthMismatch(x.len(), y.len()));
    }
    let xs = dft(x)?;
    let ys = dft(y)?;
    let norm = xs.energy().sqrt() * ys.energy().sqrt();
    if norm == T::zero() {
        return Err(AlignError::ZeroNorm);
    }
    let mut prod: Vec<Complex<T>> = xs
        .to_complex()
        .into_iter()
        .zip(ys.to_complex())
        .map(|(a, b)| a * b.conj())
        .collect();
    fft_in_place(&mut prod, true);
    Ok(prod.into_iter().map(|c| c.re / norm).collect())
}

/// Candidate lags (seconds) and the working grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSearchConfig {
    pub candidate_shifts: Vec<i64>,
    pub resample_step: i64,
}

impl ShiftSearchConfig {
    /// Every lag in `-max..=max` at the given step.
    pub fn symmetric(max_shift: i64, resample_step: i64) -> Self {
        let candidate_shifts = (-max_shift..=max_shift)
            .filter(|d| d % resample_step == 0)
            .collect();
        Self {
            candidate_shifts,
            resample_step,
        }
    }

    pub fn max_abs_shift(&self) -> i64 {
        self.candidate_shifts.iter().map(|d| d.abs()).max().unwrap_or(0)
    }
}

impl Default for ShiftSearchConfig {
    fn default() -> Self {
        Self::symmetric(600, 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub optimal_shift: i64,
    pub max_similarity: f64,
    pub similarity_curve: Vec<(i64, f64)>,
}

impl AlignmentResult {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("shift_seconds,cosine_similarity\n");
        for (d, v) in &self.similarity_curve {
            s.push_str(&format!("{d},{v}\n"));
        }
        s
    }
}

/// Argmax over the candidate set; ties go to the smallest `|d|`, then the
/// smaller `d`.
pub fn best_candidate<T: Scalar>(curve: &[(i64, T)]) -> Option<(i64, T)> {
    let mut best: Option<(i64, T)> = None;
    for &(d, v) in curve {
        best = match best {
            None => Some((d, v)),
            Some((bd, bv)) => {
                if v > bv || (v == bv && (d.abs(), d) < (bd.abs(), bd)) {
                    Some((d, v))
                } else {
                    Some((bd, bv))
                }
            }
        };
    }
    best
}

/// Similarity curve over explicit candidate lags (in samples) for two
/// equal-length sample vectors.
pub fn similarity_over<T: Scalar + FftNum>(
    x: &[T],
    y: &[T],
    shifts: &[i64],
) -> Result<Vec<(i64, T)>, AlignError> {
    let n = x.len() as i64;
    let circ = circular_similarity(x, y)?;
    Ok(shifts
        .iter()
        .map(|&d| (d, circ[d.rem_euclid(n) as usize]))
        .collect())
}

/// Regularly sampled vehicle activity (e.g. vehicles first seen per second).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivitySeries {
    pub start: i64,
    pub step: i64,
    pub values: Vec<f64>,
}

impl ActivitySeries {
    pub fn end(&self) -> i64 {
        self.start + self.step * self.values.len() as i64
    }

    fn at(&self, t: i64) -> Option<f64> {
        if t < self.start {
            return None;
        }
        self.values.get(((t - self.start) / self.step) as usize).copied()
    }
}

/// Zero-order hold of BC cells onto `[t0, t1)` at `step`, mean-imputing
/// missing cells.
fn hold_bc(series: &BcSeries, t0: i64, t1: i64, step: i64) -> Vec<f64> {
    let raw: Vec<Option<f64>> = (t0..t1)
        .step_by(step as usize)
        .map(|t| series.cell_of(t).and_then(|i| series.values[i]))
        .collect();
    let present: Vec<f64> = raw.iter().flatten().copied().collect();
    let fill = stats::mean(&present).unwrap_or(0.0);
    raw.into_iter().map(|v| v.unwrap_or(fill)).collect()
}

/// Estimates the lag `d` (seconds) maximizing the similarity between the BC
/// series `x` and the activity delayed by `d`. A positive result means BC
/// responds `d` seconds after the activity.
pub fn find_optimal_shift(
    x: &BcSeries,
    y: &ActivitySeries,
    cfg: &ShiftSearchConfig,
) -> Result<AlignmentResult, AlignError> {
    let step = cfg.resample_step;
    if step <= 0 {
        return Err(AlignError::BadCandidates(format!("resample_step = {step}")));
    }
    if cfg.candidate_shifts.is_empty() {
        return Err(AlignError::BadCandidates("empty candidate set".into()));
    }
    if let Some(d) = cfg.candidate_shifts.iter().find(|d| *d % step != 0) {
        return Err(AlignError::BadCandidates(format!(
            "shift {d} is not a multiple of the {step} s grid"
        )));
    }
    let t0 = x.start.max(y.start);
    let t1 = x.end().min(y.end());
    let overlap = (t1 - t0).max(0);
    let needed = 4 * cfg.max_abs_shift();
    if overlap == 0 || overlap < needed {
        return Err(AlignError::InsufficientOverlap { overlap, needed });
    }
    let mut xs = hold_bc(x, t0, t1, step);
    let mut ys: Vec<f64> = (t0..t1)
        .step_by(step as usize)
        .map(|t| y.at(t).unwrap_or(0.0))
        .collect();
    stats::zscore(&mut xs);
    stats::zscore(&mut ys);
    let lags: Vec<i64> = cfg.candidate_shifts.iter().map(|d| d / step).collect();
    let curve: Vec<(i64, f64)> = similarity_over(&xs, &ys, &lags)?
        .into_iter()
        .map(|(d, v)| (d * step, v))
        .collect();
    let (optimal_shift, max_similarity) = best_candidate(&curve).expect("non-empty candidates");
    Ok(AlignmentResult {
        optimal_shift,
        max_similarity,
        similarity_curve: curve,
    })
}

/// Re-times a series by `-shift` seconds so that a response lagging its cause
/// by `shift` lines up with it. Samples whose new timestamp leaves the
/// original interval are marked missing; nothing wraps around.
pub fn apply_shift(series: &BcSeries, shift: i64) -> Result<BcSeries, AlignError> {
    let duration = series.end() - series.start;
    if shift.abs() >= duration {
        return Err(AlignError::ShiftTooLarge { shift, duration });
    }
    let mut out = series.clone();
    out.start = series.start - shift;
    for i in 0..out.len() {
        let t = out.time_at(i);
        if t < series.start || t >= series.end() {
            out.values[i] = None;
        }
    }
    Ok(out)
}
