//! Workloads, the `MUSEQKV1` file format, experiment drivers and reports.

mod experiments;
mod fd;
mod qkv_io;
mod report;
pub mod selftest;
mod workload;

pub use experiments::{ablation_run, causal_bench, error_sweep, run_seeds, scaling_bench};
pub use fd::{fd_sensitivity, FdReport};
pub use qkv_io::{decode_qkv, encode_qkv, load_qkv, load_qkv_any, save_qkv, QkvFile, MAGIC};
pub use report::{AggregateRow, ExperimentReport, OrderingVerdict, ReportFormat, RunRow};
pub use workload::{generate, Qkv, WorkloadKind, WorkloadSpec, VALUE_NOISE};
