use super::Scalar;
use crate::error::{MuseError, Result};

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let t = x - y;
        acc + t * t
    })
}

/// `y += alpha * x`.
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `max(s) + log Σ exp(s − max(s))`. `-inf` entries contribute nothing; an
/// all `-inf` input returns `-inf`.
pub fn stable_logsumexp<T: Scalar>(scores: &[T]) -> Result<T> {
    if scores.is_empty() {
        return Err(MuseError::EmptyReduction);
    }
    let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return Ok(m);
    }
    let sum: T = scores.iter().map(|&s| (s - m).exp()).sum();
    Ok(m + sum.ln())
}

pub fn stable_softmax<T: Scalar>(scores: &[T]) -> Result<Vec<T>> {
    if scores.is_empty() {
        return Err(MuseError::EmptyReduction);
    }
    let mut out = scores.to_vec();
    softmax_in_place(&mut out).ok_or(MuseError::FullyMaskedRow { row: 0 })?;
    Ok(out)
}

/// Replaces `s` by `softmax(s)` and returns `logsumexp(s)`, or `None` when
/// every entry is `-inf`.
pub fn softmax_in_place<T: Scalar>(s: &mut [T]) -> Option<T> {
    let m = s.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return None;
    }
    let mut sum = T::zero();
    for x in s.iter_mut() {
        *x = (*x - m).exp();
        sum = sum + *x;
    }
    let inv = sum.recip();
    for x in s.iter_mut() {
        *x = *x * inv;
    }
    Some(m + sum.ln())
}

/// `a (m × k) · b (k × n)`, row-major.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    for (i, row) in out.chunks_exact_mut(n).enumerate() {
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            axpy(aip, &b[p * n..(p + 1) * n], row);
        }
    }
    out
}

/// `a (m × k) · bᵀ` where `b` is `n × k`, row-major.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    let mut out = Vec::with_capacity(m * n);
    for ar in a.chunks_exact(k) {
        out.extend(b.chunks_exact(k).map(|br| dot(ar, br)));
    }
    out
}
