//! Exact softmax attention with per-key bias and per-query logsumexp, plus
//! the logsumexp-weighted merge of attention partials.
//!
//! Every result carries `mu = log Σ_j exp(s_ij)` alongside the outputs, so
//! partial results over disjoint key sets combine exactly:
//! `mu = logsumexp_p(mu_p)`, `y = Σ_p exp(mu_p − mu) y_p`.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{MuseError, Result};
use crate::numerics::{axpy, dot, Scalar, Shape4, Tensor4};

/// Output rows plus per-query logsumexp.
///
/// A query with `mu = -inf` does not participate (its row of `y` is zero);
/// [`merge_partials`] gives it zero weight.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult<T> {
    pub y: Tensor4<T>,
    /// `(batch, heads, n_q)`, row-major.
    pub mu: Vec<T>,
}

impl<T: Scalar> AttentionResult<T> {
    pub fn new(y: Tensor4<T>, mu: Vec<T>) -> Result<Self> {
        let s = y.shape();
        if mu.len() != s.batch * s.heads * s.n {
            return Err(MuseError::shape(format!(
                "mu of length {} for output {s}",
                mu.len()
            )));
        }
        Ok(Self { y, mu })
    }

    pub fn shape(&self) -> Shape4 {
        self.y.shape()
    }

    pub fn mu_slice(&self, slice: usize) -> &[T] {
        let n = self.y.shape().n;
        &self.mu[slice * n..(slice + 1) * n]
    }

    pub(crate) fn from_heads(shape: Shape4, heads: Vec<HeadResult<T>>) -> Result<Self> {
        let mut mu = Vec::with_capacity(shape.batch * shape.heads * shape.n);
        let mut ys = Vec::with_capacity(heads.len());
        for h in heads {
            mu.extend_from_slice(&h.mu);
            ys.push(h.y);
        }
        Self::new(Tensor4::from_heads(shape, ys)?, mu)
    }
}

/// Per-key additive score bias, `(batch, heads, n_k)`. `-inf` masks a key.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasVector<T> {
    pub batch: usize,
    pub heads: usize,
    pub n_k: usize,
    pub b: Vec<T>,
}

impl<T: Scalar> BiasVector<T> {
    pub fn new(batch: usize, heads: usize, n_k: usize, b: Vec<T>) -> Result<Self> {
        if b.len() != batch * heads * n_k {
            return Err(MuseError::shape(format!(
                "bias of length {} for ({batch}, {heads}, {n_k})",
                b.len()
            )));
        }
        if b.iter().any(|x| x.is_nan() || *x == T::infinity()) {
            return Err(MuseError::NonFinite("bias entries must be finite or -inf".into()));
        }
        Ok(Self { batch, heads, n_k, b })
    }

    pub fn zeros(batch: usize, heads: usize, n_k: usize) -> Self {
        Self {
            batch,
            heads,
            n_k,
            b: vec![T::zero(); batch * heads * n_k],
        }
    }

    fn slice(&self, s: usize) -> &[T] {
        &self.b[s * self.n_k..(s + 1) * self.n_k]
    }
}

/// Single-head attention output.
#[derive(Debug, Clone)]
pub(crate) struct HeadResult<T> {
    pub y: Vec<T>,
    pub mu: Vec<T>,
}

impl<T: Scalar> HeadResult<T> {
    /// `n` non-participating queries.
    pub fn empty(n: usize, dv: usize) -> Self {
        Self {
            y: vec![T::zero(); n * dv],
            mu: vec![T::neg_infinity(); n],
        }
    }
}

/// One head of biased attention. Query `i` sees keys in `window(i)` only.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_head<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    dv: usize,
    bias: Option<&[T]>,
    scale: T,
    window: impl Fn(usize) -> Range<usize>,
) -> Result<HeadResult<T>> {
    let n_q = q.len() / d;
    let n_k = k.len() / d;
    let mut y = vec![T::zero(); n_q * dv];
    let mut mu = Vec::with_capacity(n_q);
    let mut scores = Vec::with_capacity(n_k);
    for (i, (qi, yi)) in q.chunks_exact(d).zip(y.chunks_exact_mut(dv)).enumerate() {
        let keys = window(i);
        scores.clear();
        scores.extend(k[keys.start * d..keys.end * d].chunks_exact(d).map(|kj| scale * dot(qi, kj)));
        if let Some(b) = bias {
            for (s, &bj) in scores.iter_mut().zip(&b[keys.clone()]) {
                *s = *s + bj;
            }
        }
        let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
        if m == T::neg_infinity() {
            return Err(MuseError::FullyMaskedRow { row: i });
        }
        let mut sum = T::zero();
        for (s, vj) in scores.iter().zip(v[keys.start * dv..keys.end * dv].chunks_exact(dv)) {
            let w = (*s - m).exp();
            sum = sum + w;
            axpy(w, vj, yi);
        }
        let inv = sum.recip();
        yi.iter_mut().for_each(|x| *x = *x * inv);
        mu.push(m + sum.ln());
    }
    Ok(HeadResult { y, mu })
}

fn check_qkv<T: Scalar>(q: &Tensor4<T>, k: &Tensor4<T>, v: &Tensor4<T>) -> Result<()> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.batch != ks.batch || qs.heads != ks.heads || ks.batch != vs.batch || ks.heads != vs.heads {
        return Err(MuseError::shape(format!(
            "batch/head extents differ: q {qs}, k {ks}, v {vs}"
        )));
    }
    if qs.d != ks.d {
        return Err(MuseError::shape(format!("q head dim {} != k head dim {}", qs.d, ks.d)));
    }
    if ks.n != vs.n {
        return Err(MuseError::shape(format!("{} keys but {} values", ks.n, vs.n)));
    }
    if ks.n == 0 {
        return Err(MuseError::shape("no keys"));
    }
    Ok(())
}

fn check_scale<T: Scalar>(scale: T) -> Result<()> {
    if !(scale > T::zero() && scale.is_finite()) {
        return Err(MuseError::config(format!("scale must be positive and finite, got {scale}")));
    }
    Ok(())
}

fn attend_windowed<T: Scalar>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    bias: Option<&BiasVector<T>>,
    scale: T,
    window: impl Fn(usize) -> Range<usize> + Sync,
) -> Result<AttentionResult<T>> {
    check_qkv(q, k, v)?;
    check_scale(scale)?;
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if let Some(b) = bias {
        if (b.batch, b.heads, b.n_k) != (ks.batch, ks.heads, ks.n) {
            return Err(MuseError::shape(format!(
                "bias ({}, {}, {}) for keys {ks}",
                b.batch, b.heads, b.n_k
            )));
        }
    }
    let heads = (0..qs.slices())
        .into_par_iter()
        .map(|s| {
            attend_head(
                q.slice(s),
                k.slice(s),
                v.slice(s),
                qs.d,
                vs.d,
                bias.map(|b| b.slice(s)),
                scale,
                &window,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    AttentionResult::from_heads(Shape4 { d: vs.d, ..qs }, heads)
}

/// Full (acausal) attention: `S = scale·q·kᵀ + 1 bᵀ`, `y = softmax(S)·v`,
/// `mu = logsumexp(S)` per row.
pub fn attend<T: Scalar>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    bias: Option<&BiasVector<T>>,
    scale: T,
) -> Result<AttentionResult<T>> {
    let n_k = k.shape().n;
    attend_windowed(q, k, v, bias, scale, |_| 0..n_k)
}

/// Causal attention: key `j` reaches query `i` only when `j <= i`.
pub fn attend_causal<T: Scalar>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    scale: T,
) -> Result<AttentionResult<T>> {
    if q.shape().n != k.shape().n {
        return Err(MuseError::shape(format!(
            "causal attention needs n_q == n_k, got {} and {}",
            q.shape().n,
            k.shape().n
        )));
    }
    attend_windowed(q, k, v, None, scale, |i| 0..i + 1)
}

/// Sliding-window causal attention: key `j` reaches query `i` iff
/// `i − window < j <= i`.
pub fn attend_sliding<T: Scalar>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    window: usize,
    scale: T,
) -> Result<AttentionResult<T>> {
    if window == 0 {
        return Err(MuseError::config("window must be at least 1"));
    }
    if q.shape().n != k.shape().n {
        return Err(MuseError::shape(format!(
            "sliding attention needs n_q == n_k, got {} and {}",
            q.shape().n,
            k.shape().n
        )));
    }
    attend_windowed(q, k, v, None, scale, |i| (i + 1).saturating_sub(window)..i + 1)
}

/// Merges per-query partial results over disjoint key sets.
pub(crate) fn merge_heads<T: Scalar>(parts: &[&HeadResult<T>], dv: usize) -> Result<HeadResult<T>> {
    let n = parts[0].mu.len();
    let mut out = HeadResult {
        y: vec![T::zero(); n * dv],
        mu: Vec::with_capacity(n),
    };
    for i in 0..n {
        let m = parts.iter().map(|p| p.mu[i]).fold(T::neg_infinity(), T::max);
        if m == T::neg_infinity() {
            return Err(MuseError::UncoveredQuery { index: i });
        }
        let sum: T = parts.iter().map(|p| (p.mu[i] - m).exp()).sum();
        let total = m + sum.ln();
        let yi = &mut out.y[i * dv..(i + 1) * dv];
        for p in parts {
            if p.mu[i] == T::neg_infinity() {
                continue;
            }
            axpy((p.mu[i] - total).exp(), &p.y[i * dv..(i + 1) * dv], yi);
        }
        out.mu.push(total);
    }
    Ok(out)
}

/// Logsumexp-weighted merge of attention partials sharing the same queries.
///
/// `mu = logsumexp_p(mu_p)` and `y = Σ_p exp(mu_p − mu)·y_p`. Parts are
/// accumulated in list order.
pub fn merge_partials<T: Scalar>(parts: &[AttentionResult<T>]) -> Result<AttentionResult<T>> {
    let first = parts.first().ok_or(MuseError::EmptyReduction)?;
    let shape = first.shape();
    if let Some(p) = parts.iter().find(|p| p.shape() != shape) {
        return Err(MuseError::shape(format!(
            "partials disagree on shape: {shape} vs {}",
            p.shape()
        )));
    }
    let n = shape.n;
    let heads = (0..shape.slices())
        .into_par_iter()
        .map(|s| {
            let owned: Vec<HeadResult<T>> = parts
                .iter()
                .map(|p| HeadResult {
                    y: p.y.slice(s).to_vec(),
                    mu: p.mu_slice(s).to_vec(),
                })
                .collect();
            let refs: Vec<&HeadResult<T>> = owned.iter().collect();
            merge_heads(&refs, shape.d).map_err(|e| match e {
                MuseError::UncoveredQuery { index } => MuseError::UncoveredQuery { index: s * n + index },
                e => e,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    AttentionResult::from_heads(shape, heads)
}
