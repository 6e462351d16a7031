//! Structural checks of the exact and approximate paths, runnable in
//! either precision. Used by the `selftest` subcommand.

use crate::attention::{attend, attend_causal, merge_partials};
use crate::causal::{build_plan, muse_causal_with, BlockMode};
use crate::error::Result;
use crate::multipole::{muse_acausal, rel_sq_error, MuseConfig};
use crate::numerics::{DType, Rng, Scalar, Shape4, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Largest relative squared error accepted where the result should be
/// exact up to rounding.
pub fn merge_tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => 1e-20,
        DType::F32 => 1e-10,
    }
}

/// Tolerance for the exactness corners of the approximation.
pub fn corner_tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => 1e-10,
        DType::F32 => 1e-8,
    }
}

fn randn<T: Scalar>(shape: Shape4, rng: &mut Rng) -> Tensor4<T> {
    let data = (0..shape.numel()).map(|_| T::of(rng.normal())).collect();
    Tensor4::new(shape, data).expect("length matches shape")
}

/// Rows `idx` of every slice of `x`.
fn gather<T: Scalar>(x: &Tensor4<T>, idx: &[usize]) -> Tensor4<T> {
    let s = x.shape();
    let mut data = Vec::with_capacity(s.slices() * idx.len() * s.d);
    for slice in 0..s.slices() {
        let h = x.slice(slice);
        for &i in idx {
            data.extend_from_slice(&h[i * s.d..(i + 1) * s.d]);
        }
    }
    Tensor4::new(s.with_n(idx.len()), data).expect("length matches shape")
}

fn worst(name: &'static str, errors: impl IntoIterator<Item = Result<f64>>, tol: f64) -> Result<Check> {
    let mut max = 0.0f64;
    let mut count = 0;
    for e in errors {
        max = max.max(e?);
        count += 1;
    }
    Ok(Check {
        name,
        passed: max <= tol,
        detail: format!("{count} instances, max rel. sq. error {max:.3e} (tolerance {tol:.0e})"),
    })
}

fn partition_invariance<T: Scalar>(seed: u64) -> Result<Check> {
    let mut rng = Rng::stream(seed, 1);
    let tol = merge_tolerance(T::DTYPE);
    let errors: Vec<Result<f64>> = (0..50)
        .map(|_| {
            let n = 2 + rng.below(63);
            let d = 1 + rng.below(8);
            let shape = Shape4::new(1, 2, n, d);
            let (q, k, v) = (randn::<T>(shape, &mut rng), randn::<T>(shape, &mut rng), randn::<T>(shape, &mut rng));
            let scale = T::of(1.0 / (d as f64).sqrt());
            let full = attend(&q, &k, &v, None, scale)?;
            let parts = 1 + rng.below(n.min(6));
            let mut groups = vec![Vec::new(); parts];
            for j in 0..n {
                // the first `parts` keys seed each group so none is empty
                let g = if j < parts { j } else { rng.below(parts) };
                groups[g].push(j);
            }
            let partials = groups
                .iter()
                .map(|g| attend(&q, &gather(&k, g), &gather(&v, g), None, scale))
                .collect::<Result<Vec<_>>>()?;
            rel_sq_error(&full, &merge_partials(&partials)?)
        })
        .collect();
    worst("partition invariance", errors, tol)
}

fn every_token_own_cluster<T: Scalar>(seed: u64) -> Result<Check> {
    let mut rng = Rng::stream(seed, 2);
    let errors: Vec<Result<f64>> = (0..10)
        .map(|s| {
            let n = 8 + rng.below(40);
            let shape = Shape4::new(1, 1, n, 4);
            let (q, k, v) = (randn::<T>(shape, &mut rng), randn::<T>(shape, &mut rng), randn::<T>(shape, &mut rng));
            let exact = attend(&q, &k, &v, None, T::of(0.5))?;
            let cfg = MuseConfig::new(n).with_seed(s);
            rel_sq_error(&exact, &muse_acausal(&q, &k, &v, &cfg)?)
        })
        .collect();
    worst("C_q = C_k = n", errors, corner_tolerance(T::DTYPE))
}

fn zero_residuals<T: Scalar>(seed: u64) -> Result<Check> {
    let mut rng = Rng::stream(seed, 3);
    let errors: Vec<Result<f64>> = (0..10)
        .map(|s| {
            let (n, d) = (64, 8);
            let shape = Shape4::new(1, 1, n, d);
            let row: Vec<T> = (0..d).map(|_| T::of(rng.normal())).collect();
            let q = Tensor4::new(shape, row.repeat(n))?;
            let (k, v) = (randn::<T>(shape, &mut rng), randn::<T>(shape, &mut rng));
            let exact = attend(&q, &k, &v, None, T::of(1.0 / (d as f64).sqrt()))?;
            let cfg = MuseConfig::new(8).with_seed(s);
            rel_sq_error(&exact, &muse_acausal(&q, &k, &v, &cfg)?)
        })
        .collect();
    worst("zero query residuals", errors, corner_tolerance(T::DTYPE))
}

fn every_key_own_cluster<T: Scalar>(seed: u64) -> Result<Check> {
    let mut rng = Rng::stream(seed, 4);
    let errors: Vec<Result<f64>> = (0..10)
        .map(|s| {
            let n = 32;
            let shape = Shape4::new(1, 1, n, 4);
            let (q, k, v) = (randn::<T>(shape, &mut rng), randn::<T>(shape, &mut rng), randn::<T>(shape, &mut rng));
            let exact = attend(&q, &k, &v, None, T::of(0.5))?;
            let mut cfg = MuseConfig::new(n).with_seed(s);
            cfg.c_q = 4;
            rel_sq_error(&exact, &muse_acausal(&q, &k, &v, &cfg)?)
        })
        .collect();
    worst("C_k = n", errors, corner_tolerance(T::DTYPE))
}

fn causal_swap_in<T: Scalar>(seed: u64) -> Result<Check> {
    let mut rng = Rng::stream(seed, 5);
    let errors: Vec<Result<f64>> = [(64, 8), (256, 32), (512, 64), (128, 128)]
        .into_iter()
        .map(|(n, b)| {
            let shape = Shape4::new(1, 2, n, 8);
            let (q, k, v) = (randn::<T>(shape, &mut rng), randn::<T>(shape, &mut rng), randn::<T>(shape, &mut rng));
            let cfg = MuseConfig::new(4);
            let exact = attend_causal(&q, &k, &v, T::of(cfg.scale_for(8)))?;
            let (swapped, _) = muse_causal_with(&q, &k, &v, &cfg, b, BlockMode::Exact)?;
            rel_sq_error(&exact, &swapped)
        })
        .collect();
    worst("causal plan with exact blocks", errors, merge_tolerance(T::DTYPE))
}

fn causal_coverage() -> Result<Check> {
    let mut bad = Vec::new();
    for (n, b) in [(64, 8), (128, 16), (256, 32), (512, 64)] {
        let plan = build_plan(n, b)?;
        let mut count = vec![0u32; n * n];
        for diag in plan.diagonal_blocks() {
            for i in diag.clone() {
                for j in diag.start..=i {
                    count[i * n + j] += 1;
                }
            }
        }
        for blk in plan.levels.iter().flat_map(|l| &l.blocks) {
            for i in blk.queries.clone() {
                for j in blk.keys.clone() {
                    count[i * n + j] += 1;
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                let expected = u32::from(j <= i);
                if count[i * n + j] != expected {
                    bad.push((n, i, j));
                }
            }
        }
    }
    Ok(Check {
        name: "causal coverage",
        passed: bad.is_empty(),
        detail: match bad.first() {
            None => "every lower-triangular pair covered once".into(),
            Some((n, i, j)) => format!("n={n}: pair ({i}, {j}) covered wrongly"),
        },
    })
}

/// Runs every check in precision `T`.
pub fn run_selftest<T: Scalar>(seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        partition_invariance::<T>(seed)?,
        every_token_own_cluster::<T>(seed)?,
        zero_residuals::<T>(seed)?,
        every_key_own_cluster::<T>(seed)?,
        causal_swap_in::<T>(seed)?,
        causal_coverage()?,
    ])
}
