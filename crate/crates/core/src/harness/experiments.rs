//! Experiment drivers. Each repetition `s` of a run with base seed `b`
//! draws its workload from `derive_seed(b, s, 0)` and its clusterings from
//! `derive_seed(b, s, 1)` (see [`run_seeds`]).

use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::attention::{attend, attend_causal, AttentionResult};
use crate::causal::{build_plan, muse_causal_with, BlockMode};
use crate::error::{MuseError, Result};
use crate::multipole::{muse_acausal, rel_sq_error, Ablation, MuseConfig};
use crate::numerics::{derive_seed, Scalar};

use super::report::{ExperimentReport, OrderingVerdict, RunRow};
use super::workload::{generate, WorkloadKind, WorkloadSpec};

/// `(workload seed, clustering seed)` of repetition `s`.
pub fn run_seeds(base: u64, s: usize) -> (u64, u64) {
    (derive_seed(base, s as u64, 0), derive_seed(base, s as u64, 1))
}

fn timed<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let start = Instant::now();
    let r = f();
    (r, start.elapsed().as_secs_f64() * 1e3)
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Short SHA-256 of the reference outputs.
fn output_hash<T: Scalar>(r: &AttentionResult<T>) -> String {
    let mut bytes = Vec::with_capacity(r.y.data().len() * 8);
    for &x in r.y.data() {
        x.write_le(&mut bytes);
    }
    let digest = Sha256::digest(&bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn config_label(cfg: &MuseConfig) -> String {
    format!(
        "c={},iters={},cap={},{}",
        cfg.c_k,
        cfg.kmeans_iters,
        cfg.cap_ratio,
        cfg.ablation.name()
    )
}

fn workload_for(spec: &WorkloadSpec, s: usize) -> WorkloadSpec {
    match spec.kind {
        WorkloadKind::File => spec.clone(),
        _ => spec.with_seed(run_seeds(spec.seed, s).0),
    }
}

fn muse_row(label: String, cfg: &MuseConfig, seed: u64, err: f64, ms: f64, shape: crate::Shape4, hash: &str) -> RunRow {
    RunRow {
        label,
        implementation: "muse".into(),
        ablation: cfg.ablation.name().into(),
        c: cfg.c_k,
        iters: cfg.kmeans_iters,
        cap_ratio: cfg.cap_ratio,
        seed,
        batch: shape.batch,
        n: shape.n,
        rel_sq_error: err,
        wall_time_ms: ms,
        tokens_processed: shape.batch * shape.heads * shape.n,
        reference_hash: hash.to_string(),
    }
}

/// Error and forward time of every grid configuration on `seeds`
/// workloads. The exact reference is computed once per workload.
pub fn error_sweep<T: Scalar>(spec: &WorkloadSpec, grid: &[MuseConfig], seeds: usize) -> Result<ExperimentReport> {
    if grid.is_empty() {
        return Err(MuseError::config("error sweep needs at least one configuration"));
    }
    if seeds == 0 {
        return Err(MuseError::config("at least one seed is required"));
    }
    grid.iter().try_for_each(MuseConfig::validate)?;
    let mut report = ExperimentReport::new("error_sweep", T::DTYPE, spec.clone(), grid.to_vec());
    report.notes.push("wall_time_ms is forward-only and includes clustering".into());
    for s in 0..seeds {
        let wspec = workload_for(spec, s);
        let data = generate::<T>(&wspec)?;
        let scale = T::of(grid[0].scale_for(data.shape().d));
        if grid.iter().any(|c| c.scale_for(data.shape().d) != grid[0].scale_for(data.shape().d)) {
            return Err(MuseError::config("all grid points must share one score scale"));
        }
        let reference = attend(&data.q, &data.k, &data.v, None, scale)?;
        let hash = output_hash(&reference);
        let cluster_seed = run_seeds(spec.seed, s).1;
        for cfg in grid {
            let cfg = cfg.clone().with_seed(cluster_seed);
            let (approx, ms) = timed(|| muse_acausal(&data.q, &data.k, &data.v, &cfg));
            let err = rel_sq_error(&reference, &approx?)?;
            report.rows.push(muse_row(config_label(&cfg), &cfg, wspec.seed, err, ms, data.shape(), &hash));
        }
    }
    report.aggregate();
    report.check()?;
    Ok(report)
}

/// Runs every [`Ablation`] of `base` on identical data and records the
/// per-seed ordering verdicts.
pub fn ablation_run<T: Scalar>(spec: &WorkloadSpec, base: &MuseConfig, seeds: usize) -> Result<ExperimentReport> {
    let grid: Vec<MuseConfig> = Ablation::ALL.iter().map(|&a| base.clone().with_ablation(a)).collect();
    let mut report = error_sweep::<T>(spec, &grid, seeds)?;
    report.experiment = "ablation".into();
    for chunk in report.rows.chunks(grid.len()) {
        let err = |a: Ablation| chunk.iter().find(|r| r.ablation == a.name()).map(|r| r.rel_sq_error).expect("every ablation ran");
        let (f, nd, sq, nm) = (
            err(Ablation::Full),
            err(Ablation::NoDipole),
            err(Ablation::SingleQueryCluster),
            err(Ablation::NoMonopole),
        );
        report.verdicts.push(OrderingVerdict {
            seed: chunk[0].seed,
            full: f,
            no_dipole: nd,
            single_query_cluster: sq,
            no_monopole: nm,
            ordered: f < nd && nd < sq && sq < nm,
            dipole_gap: nd - f,
        });
    }
    Ok(report)
}

/// Exact and approximate forward time per context length at a fixed
/// token budget: `batch = budget / (heads · n)`. Times are medians over
/// `reps` repetitions.
pub fn scaling_bench<T: Scalar>(
    spec: &WorkloadSpec,
    config: &MuseConfig,
    n_list: &[usize],
    budget: usize,
    reps: usize,
) -> Result<ExperimentReport> {
    config.validate()?;
    if reps == 0 || n_list.is_empty() {
        return Err(MuseError::config("scaling bench needs at least one length and one repetition"));
    }
    if spec.kind == WorkloadKind::File {
        return Err(MuseError::config("scaling bench generates its own workloads"));
    }
    let mut report = ExperimentReport::new("scaling", T::DTYPE, spec.clone(), vec![config.clone()]);
    report.notes.push(format!("token budget {budget}; wall_time_ms is the median of {reps} forward passes"));
    for &n in n_list {
        let per_seq = spec.heads * n;
        if per_seq == 0 || budget % per_seq != 0 {
            return Err(MuseError::config(format!(
                "token budget {budget} is not a multiple of heads·n = {per_seq}"
            )));
        }
        let wspec = WorkloadSpec {
            n,
            batch: budget / per_seq,
            ..spec.clone()
        };
        let data = generate::<T>(&wspec)?;
        let scale = T::of(config.scale_for(wspec.d));
        let mut exact_ms = Vec::with_capacity(reps);
        let mut muse_ms = Vec::with_capacity(reps);
        let mut reference = None;
        let mut approx = None;
        for _ in 0..reps {
            let (r, ms) = timed(|| attend(&data.q, &data.k, &data.v, None, scale));
            reference = Some(r?);
            exact_ms.push(ms);
            let (a, ms) = timed(|| muse_acausal(&data.q, &data.k, &data.v, config));
            approx = Some(a?);
            muse_ms.push(ms);
        }
        let reference = reference.expect("reps > 0");
        let hash = output_hash(&reference);
        let err = rel_sq_error(&reference, &approx.expect("reps > 0"))?;
        let shape = data.shape();
        report.rows.push(RunRow {
            label: format!("exact,n={n}"),
            implementation: "exact".into(),
            ablation: String::new(),
            c: 0,
            iters: 0,
            cap_ratio: 0.0,
            seed: wspec.seed,
            batch: shape.batch,
            n,
            rel_sq_error: 0.0,
            wall_time_ms: median(&mut exact_ms),
            tokens_processed: shape.batch * shape.heads * n,
            reference_hash: hash.clone(),
        });
        report.rows.push(muse_row(
            format!("muse,n={n}"),
            config,
            wspec.seed,
            err,
            median(&mut muse_ms),
            shape,
            &hash,
        ));
    }
    report.aggregate();
    report.check()?;
    Ok(report)
}

/// Causal approximation against exact causal attention.
pub fn causal_bench<T: Scalar>(spec: &WorkloadSpec, config: &MuseConfig, block: usize, seeds: usize) -> Result<ExperimentReport> {
    config.validate()?;
    if seeds == 0 {
        return Err(MuseError::config("at least one seed is required"));
    }
    let mut report = ExperimentReport::new("causal", T::DTYPE, spec.clone(), vec![config.clone()]);
    for s in 0..seeds {
        let wspec = workload_for(spec, s);
        let data = generate::<T>(&wspec)?;
        let shape = data.shape();
        let plan = build_plan(shape.n, block)?;
        if s == 0 {
            report.notes.push(format!(
                "diagonal block {block}, {} below-diagonal levels",
                plan.levels.len()
            ));
            if plan.levels.is_empty() {
                report.notes.push("exact path (no MuSe blocks)".into());
            }
        }
        let scale = T::of(config.scale_for(shape.d));
        let (reference, exact_ms) = timed(|| attend_causal(&data.q, &data.k, &data.v, scale));
        let reference = reference?;
        let hash = output_hash(&reference);
        let cfg = config.clone().with_seed(run_seeds(spec.seed, s).1);
        let (approx, ms) = timed(|| muse_causal_with(&data.q, &data.k, &data.v, &cfg, block, BlockMode::Muse));
        let (approx, stats) = approx?;
        let err = rel_sq_error(&reference, &approx)?;
        report.rows.push(RunRow {
            label: "exact_causal".into(),
            implementation: "exact".into(),
            ablation: String::new(),
            c: 0,
            iters: 0,
            cap_ratio: 0.0,
            seed: wspec.seed,
            batch: shape.batch,
            n: shape.n,
            rel_sq_error: 0.0,
            wall_time_ms: exact_ms,
            tokens_processed: shape.batch * shape.heads * shape.n,
            reference_hash: hash.clone(),
        });
        let mut row = muse_row(format!("muse_causal,block={block}"), &cfg, wspec.seed, err, ms, shape, &hash);
        row.implementation = "muse_causal".into();
        row.tokens_processed = stats.muse_query_rows;
        report.rows.push(row);
    }
    report.aggregate();
    report.check()?;
    Ok(report)
}
