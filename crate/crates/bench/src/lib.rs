//! Shared fixtures for the benchmarks.

use muse::harness::{generate, Qkv, WorkloadSpec};
use muse::{MuseConfig, Scalar};

pub const D: usize = 16;
pub const SEED: u64 = 0;

/// Clustered single-head workload of length `n`.
pub fn mixture<T: Scalar>(n: usize) -> Qkv<T> {
    generate(&WorkloadSpec::mixture(n, D, 16, 0.1, SEED)).expect("valid mixture spec")
}

/// Unstructured workload with `batch · n` tokens.
pub fn isotropic<T: Scalar>(batch: usize, n: usize) -> Qkv<T> {
    generate(&WorkloadSpec::isotropic(batch, 1, n, D, SEED)).expect("valid isotropic spec")
}

/// The default operating point: 64 clusters, one Lloyd iteration, cap 1.5.
pub fn config() -> MuseConfig {
    MuseConfig::new(64).with_seed(SEED)
}
