//! Causal attention as exact diagonal blocks plus a binary tree of strictly
//! lower blocks handled by the acausal approximation.
//!
//! With diagonal block size `b`, level spans are `b, 2b, …, n/2`. At span
//! `S`, every odd block index `m` contributes the block whose queries are
//! `[mS, (m+1)S)` and whose keys are `[(m−1)S, mS)`. Each lower-triangular
//! `(i, j)` pair outside the diagonal blocks lands in exactly one such
//! block, so per-query partials merge by logsumexp into the causal result.

use std::ops::Range;

use rayon::prelude::*;
use serde::Serialize;

use crate::attention::{attend_head, merge_heads, AttentionResult, HeadResult};
use crate::error::{MuseError, Result};
use crate::multipole::{muse_head, MuseConfig};
use crate::numerics::{derive_seed, Scalar, Tensor4};

/// One below-diagonal block. Every key precedes every query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlanBlock {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlanLevel {
    pub span: usize,
    pub blocks: Vec<PlanBlock>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CausalPlan {
    pub n: usize,
    pub b: usize,
    pub levels: Vec<PlanLevel>,
}

impl CausalPlan {
    pub fn diagonal_blocks(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.n / self.b).map(|i| i * self.b..(i + 1) * self.b)
    }

    /// Query rows covered by below-diagonal blocks, summed over levels.
    pub fn offdiagonal_query_rows(&self) -> usize {
        self.levels.iter().flat_map(|l| &l.blocks).map(|b| b.queries.len()).sum()
    }

    /// The block covering pair `(i, j)`: `None` for the diagonal block,
    /// `Some((level, block))` otherwise. Panics unless `j <= i < n`.
    pub fn locate(&self, i: usize, j: usize) -> Option<(usize, usize)> {
        assert!(j <= i && i < self.n);
        if i / self.b == j / self.b {
            return None;
        }
        let level = self
            .levels
            .iter()
            .position(|l| i / l.span != j / l.span && i / (2 * l.span) == j / (2 * l.span))
            .expect("pair below the diagonal blocks");
        Some((level, i / self.levels[level].span / 2))
    }
}

/// Builds the block plan; `n` and `b` must be powers of two with `b <= n`.
pub fn build_plan(n: usize, b: usize) -> Result<CausalPlan> {
    if !n.is_power_of_two() || !b.is_power_of_two() {
        return Err(MuseError::InvalidPlan(format!(
            "sequence length {n} and block size {b} must be powers of two"
        )));
    }
    if b > n {
        return Err(MuseError::InvalidPlan(format!("block size {b} exceeds sequence length {n}")));
    }
    let mut levels = Vec::new();
    let mut span = b;
    while span < n {
        let blocks = (1..n / span)
            .step_by(2)
            .map(|m| PlanBlock {
                queries: m * span..(m + 1) * span,
                keys: (m - 1) * span..m * span,
            })
            .collect();
        levels.push(PlanLevel { span, blocks });
        span *= 2;
    }
    Ok(CausalPlan { n, b, levels })
}

/// How below-diagonal blocks are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockMode {
    /// Multipole approximation (exact fallback when a block is smaller
    /// than the cluster counts).
    Muse,
    /// Exact attention everywhere; reproduces causal attention.
    Exact,
}

/// Work counters of a [`muse_causal_with`] call, summed over slices.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CausalStats {
    pub muse_blocks: usize,
    pub exact_blocks: usize,
    pub muse_query_rows: usize,
}

fn rows<'a, T>(x: &'a [T], r: &Range<usize>, d: usize) -> &'a [T] {
    &x[r.start * d..r.end * d]
}

#[allow(clippy::too_many_arguments)]
fn causal_head<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    dv: usize,
    plan: &CausalPlan,
    config: &MuseConfig,
    scale: T,
    slice: usize,
    mode: BlockMode,
) -> Result<(HeadResult<T>, CausalStats)> {
    let n = plan.n;
    let mut diag = HeadResult::empty(n, dv);
    for r in plan.diagonal_blocks() {
        let part = attend_head(rows(q, &r, d), rows(k, &r, d), rows(v, &r, dv), d, dv, None, scale, |i| 0..i + 1)?;
        diag.y[r.start * dv..r.end * dv].copy_from_slice(&part.y);
        diag.mu[r.clone()].copy_from_slice(&part.mu);
    }

    let min_len = config.effective_c_q().max(config.c_k);
    let mut stats = CausalStats::default();
    let mut parts = vec![diag];
    for (li, level) in plan.levels.iter().enumerate() {
        let use_muse = mode == BlockMode::Muse && level.span >= min_len;
        let results = level
            .blocks
            .par_iter()
            .enumerate()
            .map(|(bi, blk)| {
                let (qb, kb, vb) = (rows(q, &blk.queries, d), rows(k, &blk.keys, d), rows(v, &blk.keys, dv));
                if use_muse {
                    let seed = derive_seed(config.seed, slice as u64, ((li as u64) << 32) | (bi as u64 + 1));
                    muse_head(qb, kb, vb, d, dv, config, scale, seed)
                } else {
                    let n_k = blk.keys.len();
                    attend_head(qb, kb, vb, d, dv, None, scale, |_| 0..n_k)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut part = HeadResult::empty(n, dv);
        for (blk, res) in level.blocks.iter().zip(results) {
            part.y[blk.queries.start * dv..blk.queries.end * dv].copy_from_slice(&res.y);
            part.mu[blk.queries.clone()].copy_from_slice(&res.mu);
            if use_muse {
                stats.muse_blocks += 1;
                stats.muse_query_rows += blk.queries.len();
            } else {
                stats.exact_blocks += 1;
            }
        }
        parts.push(part);
    }
    let refs: Vec<&HeadResult<T>> = parts.iter().collect();
    Ok((merge_heads(&refs, dv)?, stats))
}

/// Causal attention with below-diagonal blocks computed per `mode`.
pub fn muse_causal_with<T: Scalar>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    config: &MuseConfig,
    b: usize,
    mode: BlockMode,
) -> Result<(AttentionResult<T>, CausalStats)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs != ks || (vs.batch, vs.heads, vs.n) != (ks.batch, ks.heads, ks.n) {
        return Err(MuseError::shape(format!("causal attention needs aligned q {qs}, k {ks}, v {vs}")));
    }
    config.validate()?;
    let plan = build_plan(qs.n, b)?;
    let scale = T::of(config.scale_for(qs.d));
    let heads = (0..qs.slices())
        .into_par_iter()
        .map(|s| causal_head(q.slice(s), k.slice(s), v.slice(s), qs.d, vs.d, &plan, config, scale, s, mode))
        .collect::<Result<Vec<_>>>()?;
    let mut stats = CausalStats::default();
    let mut outs = Vec::with_capacity(heads.len());
    for (h, st) in heads {
        stats.muse_blocks += st.muse_blocks;
        stats.exact_blocks += st.exact_blocks;
        stats.muse_query_rows += st.muse_query_rows;
        outs.push(h);
    }
    Ok((AttentionResult::from_heads(crate::numerics::Shape4 { d: vs.d, ..qs }, outs)?, stats))
}

/// Hierarchical causal approximation with diagonal block size `b`.
pub fn muse_causal<T: Scalar>(q: &Tensor4<T>, k: &Tensor4<T>, v: &Tensor4<T>, config: &MuseConfig, b: usize) -> Result<AttentionResult<T>> {
    muse_causal_with(q, k, v, config, b, BlockMode::Muse).map(|(r, _)| r)
}
