//! Small descriptive statistics used across modules.

use crate::scalar::Scalar;

pub fn mean<T: Scalar>(xs: &[T]) -> Option<T> {
    if xs.is_empty() {
        return None;
    }
    Some(xs.iter().copied().sum::<T>() / T::of_usize(xs.len()))
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_std<T: Scalar>(xs: &[T]) -> Option<T> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs)?;
    let ss: T = xs.iter().map(|&x| (x - m) * (x - m)).sum();
    Some((ss / T::of_usize(xs.len() - 1)).sqrt())
}

pub fn variance_pop<T: Scalar>(xs: &[T]) -> Option<T> {
    let m = mean(xs)?;
    let ss: T = xs.iter().map(|&x| (x - m) * (x - m)).sum();
    Some(ss / T::of_usize(xs.len()))
}

/// Pearson correlation. Returns `None` when either side has zero variance.
pub fn pearson<T: Scalar>(a: &[T], b: &[T]) -> Option<T> {
    assert_eq!(a.len(), b.len());
    let ma = mean(a)?;
    let mb = mean(b)?;
    let mut sab = T::zero();
    let mut saa = T::zero();
    let mut sbb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        sab = sab + dx * dy;
        saa = saa + dx * dx;
        sbb = sbb + dy * dy;
    }
    if saa == T::zero() || sbb == T::zero() {
        return None;
    }
    let r = sab / (saa * sbb).sqrt();
    Some(r.max(-T::one()).min(T::one()))
}

/// Z-score a series in place; constant series become all zeros.
pub fn zscore<T: Scalar>(xs: &mut [T]) {
    let Some(m) = mean(xs) else { return };
    let sd = variance_pop(xs).map(|v| v.sqrt()).unwrap_or_else(T::zero);
    for x in xs.iter_mut() {
        *x = if sd > T::zero() { (*x - m) / sd } else { T::zero() };
    }
}
