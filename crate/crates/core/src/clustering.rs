//! Capped K-means over the token vectors of one head.
//!
//! Initial centroids are sampled without replacement with probability
//! proportional to the squared norm. A fixed number of plain Lloyd
//! iterations follows, then a single capacity-capped assignment and a final
//! recentering, so every centroid is the mean of its members and no cluster
//! holds more than `cap = ceil(cap_ratio · n / c)` tokens.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{MuseError, Result};
use crate::numerics::{sq_dist, Rng, Scalar};

/// Result of [`kmeans`] on `n` points of dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering<T> {
    pub assignments: Vec<usize>,
    /// `c × d`, row-major.
    pub centroids: Vec<T>,
    /// Token indices of each cluster, ascending.
    pub members: Vec<Vec<usize>>,
    pub cap: usize,
    pub c: usize,
    pub d: usize,
    /// Initialisation had to fall back to uniform sampling (too few non-zero points).
    pub uniform_init: bool,
}

/// Chosen initial centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialCentroids<T> {
    pub indices: Vec<usize>,
    pub centroids: Vec<T>,
    pub uniform_fallback: bool,
}

/// Per-token split `x = centroid_part + residual`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDecomposition<T> {
    pub centroid_part: Vec<T>,
    pub residual: Vec<T>,
}

/// Clusters gathered into a dense `c × cap × d` buffer. Slots past
/// `lens[j]` are padding and never read as data.
#[derive(Debug, Clone)]
pub struct PaddedClusters<T> {
    pub c: usize,
    pub cap: usize,
    pub d: usize,
    pub data: Vec<T>,
    pub lens: Vec<usize>,
}

impl<T: Scalar> PaddedClusters<T> {
    /// The real members of cluster `j`, `lens[j] × d`.
    pub fn cluster(&self, j: usize) -> &[T] {
        let start = j * self.cap * self.d;
        &self.data[start..start + self.lens[j] * self.d]
    }
}

pub fn cap_for(n: usize, c: usize, cap_ratio: f64) -> usize {
    ((cap_ratio * n as f64 / c as f64).ceil() as usize).max(1)
}

impl<T: Scalar> Clustering<T> {
    /// Builds a clustering from fixed assignments, with centroids set to member means.
    pub fn from_assignments(x: &[T], d: usize, assignments: Vec<usize>, c: usize, cap: usize) -> Result<Self> {
        if assignments.len() * d != x.len() {
            return Err(MuseError::shape(format!(
                "{} assignments for {} points",
                assignments.len(),
                x.len() / d
            )));
        }
        if let Some(&bad) = assignments.iter().find(|&&a| a >= c) {
            return Err(MuseError::shape(format!("assignment {bad} out of range for {c} clusters")));
        }
        let centroids = recenter(x, d, &assignments, c, None);
        let members = members_of(&assignments, c);
        Ok(Self {
            assignments,
            centroids,
            members,
            cap,
            c,
            d,
            uniform_init: false,
        })
    }

    pub fn n(&self) -> usize {
        self.assignments.len()
    }

    pub fn centroid(&self, j: usize) -> &[T] {
        &self.centroids[j * self.d..(j + 1) * self.d]
    }

    /// Gathers rows of `x` (`n × dx`, in the same token order as the
    /// clustered points) into the padded per-cluster layout.
    pub fn padded(&self, x: &[T], dx: usize) -> PaddedClusters<T> {
        let cap = self.members.iter().map(Vec::len).max().unwrap_or(0).max(self.cap);
        let mut data = vec![T::zero(); self.c * cap * dx];
        for (j, m) in self.members.iter().enumerate() {
            for (slot, &t) in m.iter().enumerate() {
                let dst = (j * cap + slot) * dx;
                data[dst..dst + dx].copy_from_slice(&x[t * dx..(t + 1) * dx]);
            }
        }
        PaddedClusters {
            c: self.c,
            cap,
            d: dx,
            data,
            lens: self.members.iter().map(Vec::len).collect(),
        }
    }
}

fn members_of(assignments: &[usize], c: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); c];
    for (i, &a) in assignments.iter().enumerate() {
        members[a].push(i);
    }
    members
}

/// Member means accumulated in `f64`. Empty clusters keep `fallback` (or zero).
fn recenter<T: Scalar>(x: &[T], d: usize, assignments: &[usize], c: usize, fallback: Option<&[T]>) -> Vec<T> {
    let mut sums = vec![0.0f64; c * d];
    let mut counts = vec![0usize; c];
    for (xi, &a) in x.chunks_exact(d).zip(assignments) {
        counts[a] += 1;
        for (s, &v) in sums[a * d..(a + 1) * d].iter_mut().zip(xi) {
            *s += v.as_f64();
        }
    }
    let mut out = vec![T::zero(); c * d];
    for j in 0..c {
        let row = &mut out[j * d..(j + 1) * d];
        if counts[j] == 0 {
            if let Some(f) = fallback {
                row.copy_from_slice(&f[j * d..(j + 1) * d]);
            }
            continue;
        }
        let inv = counts[j] as f64;
        for (o, s) in row.iter_mut().zip(&sums[j * d..(j + 1) * d]) {
            *o = T::of(s / inv);
        }
    }
    out
}

/// Samples `c` distinct points with probability proportional to `‖x_i‖²`.
pub fn init_centroids<T: Scalar>(x: &[T], d: usize, c: usize, rng: &mut Rng) -> Result<InitialCentroids<T>> {
    let n = x.len() / d;
    if c == 0 {
        return Err(MuseError::config("cluster count must be at least 1"));
    }
    if c > n {
        return Err(MuseError::TooManyClusters { clusters: c, points: n });
    }
    let mut weights: Vec<f64> = x
        .chunks_exact(d)
        .map(|p| p.iter().map(|&v| v.as_f64() * v.as_f64()).sum())
        .collect();
    let mut taken = vec![false; n];
    let mut indices = Vec::with_capacity(c);
    let mut uniform_fallback = false;
    for _ in 0..c {
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 && total.is_finite() {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            let mut last_positive = 0;
            for (i, &w) in weights.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                last_positive = i;
                acc += w;
                if acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            chosen.unwrap_or(last_positive)
        } else {
            uniform_fallback = true;
            let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            free[rng.below(free.len())]
        };
        taken[pick] = true;
        weights[pick] = 0.0;
        indices.push(pick);
    }
    let centroids = indices.iter().flat_map(|&i| x[i * d..(i + 1) * d].iter().copied()).collect();
    Ok(InitialCentroids {
        indices,
        centroids,
        uniform_fallback,
    })
}

/// Index of the nearest centroid; ties go to the lowest id.
fn nearest<T: Scalar>(p: &[T], centroids: &[T], d: usize) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (j, c) in centroids.chunks_exact(d).enumerate() {
        let dist = sq_dist(p, c);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

fn assign_nearest<T: Scalar>(x: &[T], d: usize, centroids: &[T]) -> Vec<usize> {
    x.par_chunks(d).with_min_len(256).map(|p| nearest(p, centroids, d).0).collect()
}

/// Moves one point into every empty cluster: the point farthest from its
/// nearest centroid among clusters that can spare a member.
fn repair_empty<T: Scalar>(x: &[T], d: usize, assignments: &mut [usize], centroids: &mut [T], c: usize) {
    let mut counts = vec![0usize; c];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    if counts.iter().all(|&k| k > 0) {
        return;
    }
    let mut dist: Vec<T> = x
        .chunks_exact(d)
        .zip(assignments.iter())
        .map(|(p, &a)| sq_dist(p, &centroids[a * d..(a + 1) * d]))
        .collect();
    for j in 0..c {
        if counts[j] > 0 {
            continue;
        }
        let mut pick: Option<usize> = None;
        for i in 0..assignments.len() {
            if counts[assignments[i]] <= 1 {
                continue;
            }
            if pick.is_none_or(|p| dist[i] > dist[p]) {
                pick = Some(i);
            }
        }
        let Some(p) = pick else { return };
        counts[assignments[p]] -= 1;
        assignments[p] = j;
        counts[j] = 1;
        let seed = &x[p * d..(p + 1) * d];
        centroids[j * d..(j + 1) * d].copy_from_slice(seed);
        // Later repairs measure distance to the nearest centroid so far.
        for (di, xi) in dist.iter_mut().zip(x.chunks_exact(d)) {
            *di = (*di).min(sq_dist(xi, seed));
        }
    }
}

/// Greedy capacity-capped assignment.
///
/// Tokens are visited in ascending order of `d₁ − d₂` (squared distance to
/// the nearest minus to the second-nearest centroid), so the most decided
/// tokens claim their slots first. Each takes the nearest centroid that
/// still has room.
pub fn cap_assign<T: Scalar>(x: &[T], d: usize, centroids: &[T], cap: usize) -> Result<Vec<usize>> {
    let n = x.len() / d;
    let c = centroids.len() / d;
    if c == 0 || cap.saturating_mul(c) < n {
        return Err(MuseError::InfeasibleCapacity { cap, clusters: c, points: n });
    }
    let dists: Vec<Vec<T>> = x
        .par_chunks(d)
        .with_min_len(256)
        .map(|p| centroids.chunks_exact(d).map(|cj| sq_dist(p, cj)).collect())
        .collect();
    let margin = |row: &[T]| -> f64 {
        let mut first = T::infinity();
        let mut second = T::infinity();
        for &v in row {
            if v < first {
                second = first;
                first = v;
            } else if v < second {
                second = v;
            }
        }
        if c == 1 {
            0.0
        } else {
            (first - second).as_f64()
        }
    };
    let margins: Vec<f64> = dists.iter().map(|r| margin(r)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| margins[a].total_cmp(&margins[b]).then(a.cmp(&b)));

    let mut load = vec![0usize; c];
    let mut assignments = vec![0usize; n];
    let mut ranked: Vec<usize> = Vec::with_capacity(c);
    for i in order {
        let row = &dists[i];
        let (mut best, mut best_d) = (0, T::infinity());
        for (j, &v) in row.iter().enumerate() {
            if v < best_d {
                best = j;
                best_d = v;
            }
        }
        if load[best] >= cap {
            ranked.clear();
            ranked.extend(0..c);
            ranked.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
            best = *ranked.iter().find(|&&j| load[j] < cap).expect("capacity checked above");
        }
        load[best] += 1;
        assignments[i] = best;
    }
    Ok(assignments)
}

/// Capped K-means; see the module docs.
pub fn kmeans<T: Scalar>(x: &[T], d: usize, c: usize, iters: usize, cap_ratio: f64, rng: &mut Rng) -> Result<Clustering<T>> {
    kmeans_with_trace(x, d, c, iters, cap_ratio, rng).map(|(c, _)| c)
}

/// [`kmeans`], also returning the inertia after each uncapped Lloyd iteration.
pub fn kmeans_with_trace<T: Scalar>(
    x: &[T],
    d: usize,
    c: usize,
    iters: usize,
    cap_ratio: f64,
    rng: &mut Rng,
) -> Result<(Clustering<T>, Vec<f64>)> {
    validate(x, d, c, iters, cap_ratio)?;
    let init = init_centroids(x, d, c, rng)?;
    let (mut clustering, trace) = kmeans_from(x, d, init.centroids, iters, cap_ratio)?;
    clustering.uniform_init = init.uniform_fallback;
    Ok((clustering, trace))
}

fn validate<T: Scalar>(x: &[T], d: usize, c: usize, iters: usize, cap_ratio: f64) -> Result<()> {
    if d == 0 || x.len() % d != 0 {
        return Err(MuseError::shape(format!("{} scalars do not form rows of {d}", x.len())));
    }
    let n = x.len() / d;
    if c == 0 {
        return Err(MuseError::config("cluster count must be at least 1"));
    }
    if c > n {
        return Err(MuseError::TooManyClusters { clusters: c, points: n });
    }
    if iters == 0 {
        return Err(MuseError::config("kmeans needs at least one iteration"));
    }
    if !(cap_ratio >= 1.0) {
        return Err(MuseError::config(format!("cap ratio must be >= 1, got {cap_ratio}")));
    }
    Ok(())
}

/// K-means from given initial centroids (`c × d`).
pub fn kmeans_from<T: Scalar>(
    x: &[T],
    d: usize,
    mut centroids: Vec<T>,
    iters: usize,
    cap_ratio: f64,
) -> Result<(Clustering<T>, Vec<f64>)> {
    let c = centroids.len() / d;
    validate(x, d, c, iters, cap_ratio)?;
    let n = x.len() / d;
    let mut trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut assignments = assign_nearest(x, d, &centroids);
        repair_empty(x, d, &mut assignments, &mut centroids, c);
        centroids = recenter(x, d, &assignments, c, Some(&centroids));
        trace.push(inertia_of(x, d, &assignments, &centroids));
    }
    let cap = cap_for(n, c, cap_ratio);
    let mut assignments = cap_assign(x, d, &centroids, cap)?;
    repair_empty(x, d, &mut assignments, &mut centroids, c);
    let centroids = recenter(x, d, &assignments, c, Some(&centroids));
    let members = members_of(&assignments, c);
    Ok((
        Clustering {
            assignments,
            centroids,
            members,
            cap,
            c,
            d,
            uniform_init: false,
        },
        trace,
    ))
}

/// `residual_i = x_i − centroid(assign(i))`, `centroid_part_i = centroid(assign(i))`.
pub fn decompose<T: Scalar>(x: &[T], clustering: &Clustering<T>) -> ResidualDecomposition<T> {
    let d = clustering.d;
    let mut centroid_part = Vec::with_capacity(x.len());
    let mut residual = Vec::with_capacity(x.len());
    for (xi, &a) in x.chunks_exact(d).zip(&clustering.assignments) {
        let c = clustering.centroid(a);
        centroid_part.extend_from_slice(c);
        residual.extend(xi.iter().zip(c).map(|(&p, &q)| p - q));
    }
    ResidualDecomposition { centroid_part, residual }
}

fn inertia_of<T: Scalar>(x: &[T], d: usize, assignments: &[usize], centroids: &[T]) -> f64 {
    x.chunks_exact(d)
        .zip(assignments)
        .map(|(p, &a)| {
            p.iter()
                .zip(&centroids[a * d..(a + 1) * d])
                .map(|(&u, &v)| {
                    let t = u.as_f64() - v.as_f64();
                    t * t
                })
                .sum::<f64>()
        })
        .sum()
}

/// `Σ_i ‖x_i − centroid(assign(i))‖²`.
pub fn inertia<T: Scalar>(x: &[T], clustering: &Clustering<T>) -> f64 {
    inertia_of(x, clustering.d, &clustering.assignments, &clustering.centroids)
}
