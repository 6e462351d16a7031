use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "muse", version, about = "Multipole semantic attention: self-tests, error sweeps, ablations and benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exactness corners, partition invariance and causal structure checks. Prints PASS/FAIL per property.
    Selftest(Opts),
    /// Error and forward time of every (clusters x iters x cap-ratio) configuration against exact attention.
    ErrorSweep(Opts),
    /// Full, no_dipole, single_query_cluster and no_monopole on identical data. Fails unless every seed is ordered.
    Ablate(Opts),
    /// Exact vs multipole forward time per context length at a fixed token budget.
    Bench(Opts),
    /// Causal block-tree attention against exact causal attention.
    CausalBench(Opts),
    /// Writes a generated workload as a MUSEQKV1 file.
    GenQkv(Opts),
}

impl Command {
    pub fn opts(&self) -> &Opts {
        match self {
            Command::Selftest(o)
            | Command::ErrorSweep(o)
            | Command::Ablate(o)
            | Command::Bench(o)
            | Command::CausalBench(o)
            | Command::GenQkv(o) => o,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Opts {
    /// Workload generator, or a MUSEQKV1 file given by --path.
    #[arg(long, default_value = "mixture", value_parser = ["isotropic", "mixture", "file"])]
    pub workload: String,

    /// MUSEQKV1 input (--workload file only).
    #[arg(long)]
    pub path: Option<PathBuf>,

    #[arg(long, default_value_t = 1)]
    pub batch: usize,

    #[arg(long, default_value_t = 1)]
    pub heads: usize,

    /// Context length. `bench` takes a list and defaults to 1024,2048,4096.
    #[arg(long, value_delimiter = ',', default_value = "1024")]
    pub n: Vec<usize>,

    /// Head dimension.
    #[arg(long, default_value_t = 16)]
    pub d: usize,

    /// Mixture components (--workload mixture only).
    #[arg(long, default_value_t = 16)]
    pub c_true: usize,

    /// Mixture member noise relative to the centroid scale (--workload mixture only).
    #[arg(long, default_value_t = 0.1)]
    pub spread: f64,

    /// Query and key cluster counts.
    #[arg(long, value_delimiter = ',', default_value = "64")]
    pub clusters: Vec<usize>,

    /// Lloyd iterations.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub iters: Vec<usize>,

    /// Cluster capacity relative to n / clusters.
    #[arg(long, value_delimiter = ',', default_value = "1.5")]
    pub cap_ratio: Vec<f64>,

    /// Score scale [default: 1/sqrt(d)].
    #[arg(long)]
    pub scale: Option<f64>,

    #[arg(long, default_value = "full", value_parser = ["full", "no_dipole", "single_query_cluster", "no_monopole"])]
    pub ablation: String,

    /// Diagonal block length for causal-bench.
    #[arg(long, default_value_t = 256)]
    pub block: usize,

    /// Repetitions, each with its own workload and clustering seeds.
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,

    /// Base seed. Repetition s uses derive_seed(seed, s, 0) for data and derive_seed(seed, s, 1) for clustering.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long, default_value = "f64", value_parser = ["f32", "f64"])]
    pub dtype: String,

    /// Worker threads [default: all cores].
    #[arg(long)]
    pub threads: Option<usize>,

    /// Report (or MUSEQKV1 file for gen-qkv) destination [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,

    #[arg(long, default_value = "json", value_parser = ["json", "csv"])]
    pub format: String,

    /// Tokens per timed forward pass in bench; batch = budget / (heads * n).
    #[arg(long, default_value_t = 1 << 18)]
    pub budget: usize,

    /// Timing repetitions per length in bench (median reported).
    #[arg(long, default_value_t = 5)]
    pub reps: usize,

    /// Zero wall times in the report so identical invocations give identical bytes.
    #[arg(long)]
    pub no_timing: bool,
}
