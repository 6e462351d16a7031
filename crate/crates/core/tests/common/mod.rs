//! Independent reference computations for the integration tests. Everything
//! here is written as plain loops in f64 and shares no code with the crate
//! beyond its data types.
#![allow(dead_code)]

use muse::{Rng, Shape4, Tensor4};

pub fn randn(shape: Shape4, rng: &mut Rng) -> Tensor4<f64> {
    let data = (0..shape.numel()).map(|_| rng.normal()).collect();
    Tensor4::new(shape, data).unwrap()
}

pub fn qkv(shape: Shape4, seed: u64) -> (Tensor4<f64>, Tensor4<f64>, Tensor4<f64>) {
    let mut rng = Rng::new(seed);
    (randn(shape, &mut rng), randn(shape, &mut rng), randn(shape, &mut rng))
}

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Row-major `n × d` rows.
pub fn row(x: &[f64], i: usize, d: usize) -> &[f64] {
    &x[i * d..(i + 1) * d]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Masked softmax attention for one head by double loop: key `j` is visible
/// to query `i` iff `visible(i, j)`. Returns `(y, mu)`.
pub fn naive_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    dv: usize,
    scale: f64,
    visible: impl Fn(usize, usize) -> bool,
) -> (Vec<f64>, Vec<f64>) {
    let (n_q, n_k) = (q.len() / d, k.len() / d);
    let mut y = vec![0.0; n_q * dv];
    let mut mu = vec![0.0; n_q];
    for i in 0..n_q {
        let s: Vec<f64> = (0..n_k)
            .map(|j| if visible(i, j) { scale * dot(row(q, i, d), row(k, j, d)) } else { f64::NEG_INFINITY })
            .collect();
        mu[i] = lse(&s);
        for j in 0..n_k {
            if s[j] > f64::NEG_INFINITY {
                let w = (s[j] - mu[i]).exp();
                for a in 0..dv {
                    y[i * dv + a] += w * v[j * dv + a];
                }
            }
        }
    }
    (y, mu)
}

pub fn rel_sq(reference: &[f64], approx: &[f64]) -> f64 {
    let num: f64 = reference.iter().zip(approx).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = reference.iter().map(|a| a * a).sum();
    num / den
}

/// Groups of row indices per cluster.
fn groups(assignments: &[usize], c: usize) -> Vec<Vec<usize>> {
    let mut g = vec![Vec::new(); c];
    for (t, &a) in assignments.iter().enumerate() {
        g[a].push(t);
    }
    g
}

fn mean_rows(x: &[f64], idx: &[usize], d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for &t in idx {
        for a in 0..d {
            m[a] += x[t * d + a];
        }
    }
    m.iter_mut().for_each(|x| *x /= idx.len() as f64);
    m
}

/// Which terms the equation-level oracle includes.
#[derive(Clone, Copy, PartialEq)]
pub enum Terms {
    Full,
    MonopoleOnly,
}

/// The two-stage multipole approximation written out term by term for one
/// head, given query/key cluster assignments. `qs` are the already scaled
/// queries. Returns `(y, mu)`.
pub fn muse_oracle(
    qs: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    dv: usize,
    q_assign: &[usize],
    c_q: usize,
    k_assign: &[usize],
    c_k: usize,
    terms: Terms,
) -> (Vec<f64>, Vec<f64>) {
    let qg = groups(q_assign, c_q);
    let kg = groups(k_assign, c_k);
    let n_q = qs.len() / d;
    let mut y = vec![0.0; n_q * dv];
    let mut mu_out = vec![0.0; n_q];

    // untilted covariance per key cluster, dv × d
    let covs: Vec<Vec<f64>> = kg
        .iter()
        .map(|g| {
            let km = mean_rows(k, g, d);
            let vm = mean_rows(v, g, dv);
            let mut c = vec![0.0; dv * d];
            for &t in g {
                for a in 0..dv {
                    for b in 0..d {
                        c[a * d + b] += (v[t * dv + a] - vm[a]) * (k[t * d + b] - km[b]) / g.len() as f64;
                    }
                }
            }
            c
        })
        .collect();

    for members in &qg {
        if members.is_empty() {
            continue;
        }
        let qbar = mean_rows(qs, members, d);
        let mut mu = vec![0.0; c_k];
        let mut kbar = vec![vec![0.0; d]; c_k];
        let mut vbar = vec![vec![0.0; dv]; c_k];
        for (j, g) in kg.iter().enumerate() {
            let s: Vec<f64> = g.iter().map(|&t| dot(&qbar, row(k, t, d))).collect();
            mu[j] = lse(&s);
            for (&t, &st) in g.iter().zip(&s) {
                let w = (st - mu[j]).exp();
                for a in 0..d {
                    kbar[j][a] += w * k[t * d + a];
                }
                for a in 0..dv {
                    vbar[j][a] += w * v[t * dv + a];
                }
            }
        }
        let m0 = lse(&mu);
        let mut cov_i = vec![0.0; dv * d];
        for j in 0..c_k {
            let w = (mu[j] - m0).exp();
            for e in 0..dv * d {
                cov_i[e] += w * covs[j][e];
            }
        }
        for &t in members {
            let qt: Vec<f64> = (0..d).map(|a| qs[t * d + a] - qbar[a]).collect();
            let s: Vec<f64> = (0..c_k).map(|j| dot(&qt, &kbar[j]) + mu[j]).collect();
            let m = lse(&s);
            mu_out[t] = m;
            for j in 0..c_k {
                let w = (s[j] - m).exp();
                for a in 0..dv {
                    y[t * dv + a] += w * vbar[j][a];
                }
            }
            if terms == Terms::Full {
                for a in 0..dv {
                    y[t * dv + a] += dot(&cov_i[a * d..(a + 1) * d], &qt);
                }
            }
        }
    }
    (y, mu_out)
}
