//! Acausal multipole semantic attention.
//!
//! Per head, with queries pre-multiplied by the score scale:
//!
//! 1. Cluster queries into `c_q` and keys into `c_k` clusters (values follow
//!    their key's cluster).
//! 2. [`stage1`]: every query centroid attends exactly to every key cluster,
//!    giving tilted key/value centroids and `mu[i][j] = log Σ_{k∈j} exp(q̄_i·k)`.
//!    Each key cluster also gets its untilted value/key covariance.
//! 3. [`aggregate_dipoles`]: mix the covariances per query cluster with
//!    weights `softmax_j(mu[i][j])`.
//! 4. [`final_stage`]: each residual `q̃ = q − q̄_i` attends to the `c_k`
//!    tilted centroids with bias `mu[i]`, plus the dipole term `Cov_i · q̃`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionResult, HeadResult};
use crate::clustering::{decompose, kmeans, Clustering, PaddedClusters};
use crate::error::{MuseError, Result};
use crate::numerics::{axpy, derive_seed, dot, matmul_nt, softmax_in_place, Rng, Scalar, Tensor4};

/// Which parts of the approximation are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Monopole only; the covariance correction is dropped.
    NoDipole,
    /// One query cluster: every query is refined from the global query mean.
    SingleQueryCluster,
    /// Global value mean plus the uniformly averaged dipole term. A control
    /// that should be badly wrong.
    NoMonopole,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoDipole,
        Ablation::SingleQueryCluster,
        Ablation::NoMonopole,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoDipole => "no_dipole",
            Ablation::SingleQueryCluster => "single_query_cluster",
            Ablation::NoMonopole => "no_monopole",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = MuseError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| MuseError::config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuseConfig {
    pub c_q: usize,
    pub c_k: usize,
    pub kmeans_iters: usize,
    pub cap_ratio: f64,
    /// Score scale; `None` means `1/√d`.
    pub scale: Option<f64>,
    pub ablation: Ablation,
    pub seed: u64,
}

impl MuseConfig {
    /// `c` query and key clusters, one K-means iteration, cap ratio 1.5.
    pub fn new(c: usize) -> Self {
        Self {
            c_q: c,
            c_k: c,
            kmeans_iters: 1,
            cap_ratio: 1.5,
            scale: None,
            ablation: Ablation::Full,
            seed: 0,
        }
    }

    pub fn with_iters(mut self, iters: usize) -> Self {
        self.kmeans_iters = iters;
        self
    }

    pub fn with_cap_ratio(mut self, cap_ratio: f64) -> Self {
        self.cap_ratio = cap_ratio;
        self
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = Some(scale);
        self
    }

    /// Query clusters actually used (1 under [`Ablation::SingleQueryCluster`]).
    pub fn effective_c_q(&self) -> usize {
        match self.ablation {
            Ablation::SingleQueryCluster => 1,
            _ => self.c_q,
        }
    }

    pub fn scale_for(&self, d: usize) -> f64 {
        self.scale.unwrap_or(1.0 / (d as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_q == 0 || self.c_k == 0 {
            return Err(MuseError::config("cluster counts must be at least 1"));
        }
        if self.kmeans_iters == 0 {
            return Err(MuseError::config("kmeans_iters must be at least 1"));
        }
        if !(self.cap_ratio >= 1.0) || !self.cap_ratio.is_finite() {
            return Err(MuseError::config(format!("cap_ratio must be >= 1, got {}", self.cap_ratio)));
        }
        if let Some(s) = self.scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(MuseError::config(format!("scale must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

/// Output of [`stage1`] for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSummaries<T> {
    pub c_q: usize,
    pub c_k: usize,
    pub d: usize,
    pub dv: usize,
    /// `(c_q, c_k, d)` tilted key centroids `K_j(q̄_i)`.
    pub kbar: Vec<T>,
    /// `(c_q, c_k, dv)` tilted value centroids `V_j(q̄_i)`.
    pub vbar: Vec<T>,
    /// `(c_q, c_k)` log-normalisers `log M_j(q̄_i)`.
    pub mu: Vec<T>,
    /// `(c_k, dv, d)` untilted covariance `(1/U) Σ (v − v̄)(k − k̄)ᵀ`.
    pub cov_vk: Vec<T>,
    /// Mean of every value in the head (used by [`Ablation::NoMonopole`]).
    pub value_mean: Vec<T>,
}

impl<T: Scalar> ClusterSummaries<T> {
    pub fn kbar(&self, i: usize, j: usize) -> &[T] {
        let o = (i * self.c_k + j) * self.d;
        &self.kbar[o..o + self.d]
    }

    pub fn vbar(&self, i: usize, j: usize) -> &[T] {
        let o = (i * self.c_k + j) * self.dv;
        &self.vbar[o..o + self.dv]
    }

    pub fn mu_row(&self, i: usize) -> &[T] {
        &self.mu[i * self.c_k..(i + 1) * self.c_k]
    }

    pub fn cov(&self, j: usize) -> &[T] {
        let len = self.dv * self.d;
        &self.cov_vk[j * len..(j + 1) * len]
    }
}

/// Per-query-cluster dipole matrices, `(c_q, dv, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedDipoles<T> {
    pub c_q: usize,
    pub dv: usize,
    pub d: usize,
    pub cov_q: Vec<T>,
}

impl<T: Scalar> AggregatedDipoles<T> {
    pub fn cov(&self, i: usize) -> &[T] {
        let len = self.dv * self.d;
        &self.cov_q[i * len..(i + 1) * len]
    }
}

/// Final-stage output of one query cluster, in member order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterOutput<T> {
    pub y: Vec<T>,
    pub mu: Vec<T>,
}

struct KeyClusterSummary<T> {
    mu: Vec<T>,
    kbar: Vec<T>,
    vbar: Vec<T>,
    cov: Vec<T>,
}

/// `(1/U) Σ (v − v̄)(k − k̄)ᵀ`, `dv × d`.
fn centered_cov<T: Scalar>(keys: &[T], values: &[T], d: usize, dv: usize) -> Vec<T> {
    let u = keys.len() / d;
    let inv = T::of(1.0 / u as f64);
    let mut kmean = vec![T::zero(); d];
    let mut vmean = vec![T::zero(); dv];
    for (kr, vr) in keys.chunks_exact(d).zip(values.chunks_exact(dv)) {
        axpy(inv, kr, &mut kmean);
        axpy(inv, vr, &mut vmean);
    }
    let mut cov = vec![T::zero(); dv * d];
    let mut kc = vec![T::zero(); d];
    for (kr, vr) in keys.chunks_exact(d).zip(values.chunks_exact(dv)) {
        for (c, (&k, &m)) in kc.iter_mut().zip(kr.iter().zip(&kmean)) {
            *c = k - m;
        }
        for (a, (&v, &m)) in vr.iter().zip(&vmean).enumerate() {
            axpy((v - m) * inv, &kc, &mut cov[a * d..(a + 1) * d]);
        }
    }
    cov
}

/// Initial stage: exact attention from each query centroid to each key cluster.
///
/// `qbar` is `c_q × d` in scaled units. Padding slots of the key/value views
/// are excluded from both the softmax and the covariance.
pub fn stage1<T: Scalar>(qbar: &[T], keys: &PaddedClusters<T>, values: &PaddedClusters<T>) -> Result<ClusterSummaries<T>> {
    let d = keys.d;
    let dv = values.d;
    if qbar.is_empty() || qbar.len() % d != 0 {
        return Err(MuseError::shape(format!("query centroids of length {} for d = {d}", qbar.len())));
    }
    if keys.c != values.c || keys.lens != values.lens {
        return Err(MuseError::shape("key and value clusters disagree"));
    }
    let c_q = qbar.len() / d;
    let c_k = keys.c;
    if let Some(j) = keys.lens.iter().position(|&l| l == 0) {
        return Err(MuseError::EmptyCluster(j));
    }
    let per_cluster: Vec<KeyClusterSummary<T>> = (0..c_k)
        .into_par_iter()
        .map(|j| {
            let kj = keys.cluster(j);
            let vj = values.cluster(j);
            let u = keys.lens[j];
            let mut scores = matmul_nt(qbar, kj, c_q, d, u);
            let mut mu = Vec::with_capacity(c_q);
            let mut kbar = vec![T::zero(); c_q * d];
            let mut vbar = vec![T::zero(); c_q * dv];
            for (i, p) in scores.chunks_exact_mut(u).enumerate() {
                mu.push(softmax_in_place(p).expect("finite scores"));
                for (t, &w) in p.iter().enumerate() {
                    axpy(w, &kj[t * d..(t + 1) * d], &mut kbar[i * d..(i + 1) * d]);
                    axpy(w, &vj[t * dv..(t + 1) * dv], &mut vbar[i * dv..(i + 1) * dv]);
                }
            }
            KeyClusterSummary {
                mu,
                kbar,
                vbar,
                cov: centered_cov(kj, vj, d, dv),
            }
        })
        .collect();

    let mut out = ClusterSummaries {
        c_q,
        c_k,
        d,
        dv,
        kbar: vec![T::zero(); c_q * c_k * d],
        vbar: vec![T::zero(); c_q * c_k * dv],
        mu: vec![T::zero(); c_q * c_k],
        cov_vk: Vec::with_capacity(c_k * dv * d),
        value_mean: vec![T::zero(); dv],
    };
    let total: usize = values.lens.iter().sum();
    let inv = T::of(1.0 / total as f64);
    for (j, s) in per_cluster.into_iter().enumerate() {
        for i in 0..c_q {
            out.mu[i * c_k + j] = s.mu[i];
            let o = (i * c_k + j) * d;
            out.kbar[o..o + d].copy_from_slice(&s.kbar[i * d..(i + 1) * d]);
            let o = (i * c_k + j) * dv;
            out.vbar[o..o + dv].copy_from_slice(&s.vbar[i * dv..(i + 1) * dv]);
        }
        out.cov_vk.extend_from_slice(&s.cov);
        for row in values.cluster(j).chunks_exact(dv) {
            axpy(inv, row, &mut out.value_mean);
        }
    }
    Ok(out)
}

/// Mixes the per-key-cluster covariances for each query cluster with
/// weights `softmax_j(mu[i][j])`, the merge weights at `q̃ = 0`.
pub fn aggregate_dipoles<T: Scalar>(summaries: &ClusterSummaries<T>) -> AggregatedDipoles<T> {
    let len = summaries.dv * summaries.d;
    let mut cov_q = vec![T::zero(); summaries.c_q * len];
    for (i, out) in cov_q.chunks_exact_mut(len).enumerate() {
        let mut w = summaries.mu_row(i).to_vec();
        softmax_in_place(&mut w).expect("finite logsumexps");
        for (j, &wj) in w.iter().enumerate() {
            axpy(wj, summaries.cov(j), out);
        }
    }
    AggregatedDipoles {
        c_q: summaries.c_q,
        dv: summaries.dv,
        d: summaries.d,
        cov_q,
    }
}

/// `y += cov · x` for a row-major `dv × d` matrix.
fn add_matvec<T: Scalar>(cov: &[T], x: &[T], y: &mut [T]) {
    let d = x.len();
    for (a, yi) in y.iter_mut().enumerate() {
        *yi = *yi + dot(&cov[a * d..(a + 1) * d], x);
    }
}

/// Final stage for every query cluster. `residuals` holds `q̃` (scaled
/// units) grouped by query cluster.
pub fn final_stage<T: Scalar>(
    residuals: &PaddedClusters<T>,
    summaries: &ClusterSummaries<T>,
    dipoles: &AggregatedDipoles<T>,
    ablation: Ablation,
) -> Result<Vec<ClusterOutput<T>>> {
    let (c_k, d, dv) = (summaries.c_k, summaries.d, summaries.dv);
    if residuals.c != summaries.c_q || dipoles.c_q != summaries.c_q {
        return Err(MuseError::shape(format!(
            "{} residual clusters, {} summaries, {} dipoles",
            residuals.c, summaries.c_q, dipoles.c_q
        )));
    }
    if residuals.d != d {
        return Err(MuseError::shape(format!("residual dim {} vs key dim {d}", residuals.d)));
    }
    let uniform_cov = if ablation == Ablation::NoMonopole {
        let mut m = vec![T::zero(); dv * d];
        let w = T::of(1.0 / c_k as f64);
        for j in 0..c_k {
            axpy(w, summaries.cov(j), &mut m);
        }
        Some(m)
    } else {
        None
    };
    Ok((0..summaries.c_q)
        .into_par_iter()
        .map(|i| {
            let rows = residuals.cluster(i);
            let u = residuals.lens[i];
            let mu_row = summaries.mu_row(i);
            let mut y = vec![T::zero(); u * dv];
            let mut mu = Vec::with_capacity(u);
            let mut s = vec![T::zero(); c_k];
            for (qt, yt) in rows.chunks_exact(d).zip(y.chunks_exact_mut(dv)) {
                for (j, sj) in s.iter_mut().enumerate() {
                    *sj = dot(qt, summaries.kbar(i, j)) + mu_row[j];
                }
                mu.push(softmax_in_place(&mut s).expect("finite scores"));
                match ablation {
                    Ablation::NoMonopole => {
                        yt.copy_from_slice(&summaries.value_mean);
                        add_matvec(uniform_cov.as_deref().expect("built above"), qt, yt);
                    }
                    _ => {
                        for (j, &w) in s.iter().enumerate() {
                            axpy(w, summaries.vbar(i, j), yt);
                        }
                        if ablation != Ablation::NoDipole {
                            add_matvec(dipoles.cov(i), qt, yt);
                        }
                    }
                }
            }
            ClusterOutput { y, mu }
        })
        .collect())
}

/// Query and key clusterings of one (batch, head) slice.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadClusterings<T> {
    /// Clustering of the scaled queries.
    pub query: Clustering<T>,
    pub key: Clustering<T>,
}

fn check_config_for(config: &MuseConfig, n_q: usize, n_k: usize) -> Result<()> {
    config.validate()?;
    let c_q = config.effective_c_q();
    if c_q > n_q {
        return Err(MuseError::TooManyClusters { clusters: c_q, points: n_q });
    }
    if config.c_k > n_k {
        return Err(MuseError::TooManyClusters { clusters: config.c_k, points: n_k });
    }
    Ok(())
}

/// Clusters the scaled queries and the keys of one head.
pub(crate) fn cluster_head<T: Scalar>(qs: &[T], k: &[T], d: usize, config: &MuseConfig, seed: u64) -> Result<HeadClusterings<T>> {
    let query = kmeans(qs, d, config.effective_c_q(), config.kmeans_iters, config.cap_ratio, &mut Rng::stream(seed, 0))?;
    let key = kmeans(k, d, config.c_k, config.kmeans_iters, config.cap_ratio, &mut Rng::stream(seed, 1))?;
    Ok(HeadClusterings { query, key })
}

/// Runs stages 1–3 on one head with the given clusterings. Query centroids
/// are recomputed from `qs` and the stored assignments, so a clustering can
/// be held fixed while `qs` moves.
pub(crate) fn muse_head_clustered<T: Scalar>(
    qs: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    dv: usize,
    cl: &HeadClusterings<T>,
    ablation: Ablation,
) -> Result<HeadResult<T>> {
    let query = Clustering::from_assignments(qs, d, cl.query.assignments.clone(), cl.query.c, cl.query.cap)?;
    let key = Clustering::from_assignments(k, d, cl.key.assignments.clone(), cl.key.c, cl.key.cap)?;
    let summaries = stage1(&query.centroids, &key.padded(k, d), &key.padded(v, dv))?;
    let dipoles = aggregate_dipoles(&summaries);
    let residual = decompose(qs, &query).residual;
    let outputs = final_stage(&query.padded(&residual, d), &summaries, &dipoles, ablation)?;

    let n_q = qs.len() / d;
    let mut out = HeadResult {
        y: vec![T::zero(); n_q * dv],
        mu: vec![T::zero(); n_q],
    };
    for (members, o) in query.members.iter().zip(outputs) {
        for (slot, &t) in members.iter().enumerate() {
            out.y[t * dv..(t + 1) * dv].copy_from_slice(&o.y[slot * dv..(slot + 1) * dv]);
            out.mu[t] = o.mu[slot];
        }
    }
    Ok(out)
}

/// Full pipeline for one head: scale, cluster, approximate.
pub(crate) fn muse_head<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    dv: usize,
    config: &MuseConfig,
    scale: T,
    seed: u64,
) -> Result<HeadResult<T>> {
    check_config_for(config, q.len() / d, k.len() / d)?;
    let qs: Vec<T> = q.iter().map(|&x| x * scale).collect();
    let cl = cluster_head(&qs, k, d, config, seed)?;
    muse_head_clustered(&qs, k, v, d, dv, &cl, config.ablation)
}

/// Seed for slice `slice` of an acausal call.
pub(crate) fn slice_seed(config: &MuseConfig, slice: usize) -> u64 {
    derive_seed(config.seed, slice as u64, 0)
}

fn check_shapes<T: Scalar>(q: &Tensor4<T>, k: &Tensor4<T>, v: &Tensor4<T>) -> Result<()> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if (qs.batch, qs.heads) != (ks.batch, ks.heads) || (ks.batch, ks.heads, ks.n) != (vs.batch, vs.heads, vs.n) || qs.d != ks.d {
        return Err(MuseError::shape(format!("incompatible q {qs}, k {ks}, v {vs}")));
    }
    Ok(())
}

/// Clusters every (batch, head) slice as [`muse_acausal`] would.
pub fn cluster_heads<T: Scalar>(q: &Tensor4<T>, k: &Tensor4<T>, config: &MuseConfig) -> Result<Vec<HeadClusterings<T>>> {
    let (qs, ks) = (q.shape(), k.shape());
    check_config_for(config, qs.n, ks.n)?;
    let scale = T::of(config.scale_for(qs.d));
    (0..qs.slices())
        .into_par_iter()
        .map(|s| {
            let scaled: Vec<T> = q.slice(s).iter().map(|&x| x * scale).collect();
            cluster_head(&scaled, k.slice(s), qs.d, config, slice_seed(config, s))
        })
        .collect()
}

/// [`muse_acausal`] with clusterings supplied by the caller. Only the
/// assignments are used; centroids are recomputed from the current inputs.
pub fn muse_acausal_frozen<T: Scalar>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    config: &MuseConfig,
    clusterings: &[HeadClusterings<T>],
) -> Result<AttentionResult<T>> {
    check_shapes(q, k, v)?;
    let (qs, vs) = (q.shape(), v.shape());
    if clusterings.len() != qs.slices() {
        return Err(MuseError::shape(format!(
            "{} clusterings for {} slices",
            clusterings.len(),
            qs.slices()
        )));
    }
    let scale = T::of(config.scale_for(qs.d));
    let heads = (0..qs.slices())
        .into_par_iter()
        .map(|s| {
            let scaled: Vec<T> = q.slice(s).iter().map(|&x| x * scale).collect();
            muse_head_clustered(&scaled, k.slice(s), v.slice(s), qs.d, vs.d, &clusterings[s], config.ablation)
        })
        .collect::<Result<Vec<_>>>()?;
    AttentionResult::from_heads(crate::numerics::Shape4 { d: vs.d, ..qs }, heads)
}

/// Acausal multipole approximation of `attend(q, k, v, None, scale)`.
///
/// The returned `mu` are approximate per-query logsumexps, usable with
/// [`crate::merge_partials`].
pub fn muse_acausal<T: Scalar>(q: &Tensor4<T>, k: &Tensor4<T>, v: &Tensor4<T>, config: &MuseConfig) -> Result<AttentionResult<T>> {
    check_shapes(q, k, v)?;
    let clusterings = cluster_heads(q, k, config)?;
    muse_acausal_frozen(q, k, v, config, &clusterings)
}

/// `‖y_ref − y‖² / ‖y_ref‖²` over every output entry.
pub fn rel_sq_error<T: Scalar>(reference: &AttentionResult<T>, approx: &AttentionResult<T>) -> Result<f64> {
    if reference.shape() != approx.shape() {
        return Err(MuseError::shape(format!(
            "reference {} vs approximation {}",
            reference.shape(),
            approx.shape()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&r, &a) in reference.y.data().iter().zip(approx.y.data()) {
        let (r, a) = (r.as_f64(), a.as_f64());
        num += (r - a) * (r - a);
        den += r * r;
    }
    if den == 0.0 {
        return Err(MuseError::ZeroReferenceNorm);
    }
    Ok(num / den)
}
