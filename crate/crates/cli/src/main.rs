//! `muse` command-line entry point.

mod args;

use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches};

use args::{Cli, Command, Opts};
use muse::harness::{
    ablation_run, causal_bench, error_sweep, generate, run_seeds, save_qkv, scaling_bench, selftest, ExperimentReport,
    ReportFormat, WorkloadSpec,
};
use muse::{Ablation, DType, MuseConfig};

const DATA_FLAGS: &[&str] = &["batch", "heads", "n", "d", "c_true", "spread"];
const CONFIG_FLAGS: &[&str] = &["clusters", "iters", "cap_ratio", "scale"];
const REPORT_FLAGS: &[&str] = &["out", "format", "no_timing"];

fn allowed(command: &Command) -> Vec<&'static str> {
    let mut a = vec!["seed", "dtype", "threads"];
    let mut add = |xs: &[&'static str]| a.extend_from_slice(xs);
    match command {
        Command::Selftest(_) => {}
        Command::ErrorSweep(_) => {
            add(&["workload", "path", "ablation", "seeds"]);
            add(DATA_FLAGS);
            add(CONFIG_FLAGS);
            add(REPORT_FLAGS);
        }
        Command::Ablate(_) => {
            add(&["workload", "path", "seeds"]);
            add(DATA_FLAGS);
            add(CONFIG_FLAGS);
            add(REPORT_FLAGS);
        }
        Command::Bench(_) => {
            add(&["workload", "ablation", "budget", "reps", "heads", "n", "d", "c_true", "spread"]);
            add(CONFIG_FLAGS);
            add(REPORT_FLAGS);
        }
        Command::CausalBench(_) => {
            add(&["workload", "path", "ablation", "block", "seeds"]);
            add(DATA_FLAGS);
            add(CONFIG_FLAGS);
            add(REPORT_FLAGS);
        }
        Command::GenQkv(_) => {
            add(&["workload", "out"]);
            add(DATA_FLAGS);
        }
    }
    a
}

fn flag(id: &str) -> String {
    format!("--{}", id.replace('_', "-"))
}

/// Rejects flags that do not apply to the subcommand or contradict each other.
fn validate(name: &str, command: &Command, m: &ArgMatches) -> Result<()> {
    let given = |id: &str| m.value_source(id) == Some(ValueSource::CommandLine);
    let ok = allowed(command);
    for arg in Cli::command().find_subcommand(name).expect("known subcommand").get_arguments() {
        let id = arg.get_id().as_str();
        if given(id) && !ok.contains(&id) {
            bail!("{} does not apply to {name}", flag(id));
        }
    }
    let o = command.opts();
    match o.workload.as_str() {
        "file" => {
            if o.path.is_none() {
                bail!("--workload file needs --path");
            }
            if matches!(command, Command::Bench(_) | Command::GenQkv(_)) {
                bail!("--workload file is not supported by {name}; it generates its own data");
            }
            if let Some(id) = DATA_FLAGS.iter().find(|id| given(id)) {
                bail!("{} conflicts with --workload file (the shape comes from the file)", flag(id));
            }
        }
        w => {
            if o.path.is_some() {
                bail!("--path needs --workload file (got --workload {w})");
            }
            if w == "isotropic" {
                if let Some(id) = ["c_true", "spread"].iter().find(|id| given(id)) {
                    bail!("{} only applies to --workload mixture", flag(id));
                }
            }
        }
    }
    let grid = matches!(command, Command::ErrorSweep(_));
    for (id, len) in [("clusters", o.clusters.len()), ("iters", o.iters.len()), ("cap_ratio", o.cap_ratio.len())] {
        if len > 1 && !grid {
            bail!("{} takes a single value for {name}", flag(id));
        }
    }
    if o.n.len() > 1 && !matches!(command, Command::Bench(_)) {
        bail!("--n takes a single value for {name}");
    }
    if matches!(command, Command::GenQkv(_)) && o.out.is_none() {
        bail!("gen-qkv needs --out");
    }
    if o.threads == Some(0) {
        bail!("--threads must be at least 1");
    }
    Ok(())
}

fn dtype(o: &Opts) -> DType {
    if o.dtype == "f32" {
        DType::F32
    } else {
        DType::F64
    }
}

fn workload(o: &Opts) -> WorkloadSpec {
    match o.workload.as_str() {
        "file" => WorkloadSpec::file(o.path.clone().expect("validated")),
        "isotropic" => WorkloadSpec::isotropic(o.batch, o.heads, o.n[0], o.d, o.seed),
        _ => WorkloadSpec {
            batch: o.batch,
            heads: o.heads,
            ..WorkloadSpec::mixture(o.n[0], o.d, o.c_true, o.spread, o.seed)
        },
    }
}

fn grid(o: &Opts, ablation: Ablation) -> Vec<MuseConfig> {
    let mut grid = Vec::new();
    for &c in &o.clusters {
        for &iters in &o.iters {
            for &cap in &o.cap_ratio {
                let mut cfg = MuseConfig::new(c)
                    .with_iters(iters)
                    .with_cap_ratio(cap)
                    .with_ablation(ablation)
                    .with_seed(o.seed);
                if let Some(s) = o.scale {
                    cfg = cfg.with_scale(s);
                }
                grid.push(cfg);
            }
        }
    }
    grid
}

fn emit(o: &Opts, report: ExperimentReport) -> Result<()> {
    let report = if o.no_timing { report.without_timing() } else { report };
    for note in &report.notes {
        eprintln!("note: {note}");
    }
    for a in &report.aggregates {
        eprintln!(
            "{:<40} runs {:>2}  rel. sq. error {:.4e} +- {:.1e}  time {:.2} ms",
            a.label, a.runs, a.mean_rel_sq_error, a.std_rel_sq_error, a.mean_wall_time_ms
        );
    }
    let format = if o.format == "csv" { ReportFormat::Csv } else { ReportFormat::Json };
    match &o.out {
        Some(path) => report.write(path, format)?,
        None => println!("{}", report.render(format)?),
    }
    Ok(())
}

/// Runs the subcommand. `Ok(false)` means an assertion failed.
fn run(command: &Command, n_given: bool) -> Result<bool> {
    let o = command.opts();
    let dt = dtype(o);
    let ablation: Ablation = o.ablation.parse()?;
    macro_rules! typed {
        ($f:ident($($arg:expr),*)) => {
            match dt {
                DType::F32 => $f::<f32>($($arg),*),
                DType::F64 => $f::<f64>($($arg),*),
            }
        };
    }
    match command {
        Command::Selftest(_) => {
            let checks = match dt {
                DType::F32 => selftest::run_selftest::<f32>(o.seed)?,
                DType::F64 => selftest::run_selftest::<f64>(o.seed)?,
            };
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(checks.iter().all(|c| c.passed))
        }
        Command::ErrorSweep(_) => {
            let report = typed!(error_sweep(&workload(o), &grid(o, ablation), o.seeds))?;
            emit(o, report)?;
            Ok(true)
        }
        Command::Ablate(_) => {
            let base = grid(o, Ablation::Full).remove(0);
            let report = typed!(ablation_run(&workload(o), &base, o.seeds))?;
            for v in &report.verdicts {
                eprintln!(
                    "seed {:>20}: full {:.4e} < no_dipole {:.4e} < single_query_cluster {:.4e} < no_monopole {:.4e}: {}",
                    v.seed,
                    v.full,
                    v.no_dipole,
                    v.single_query_cluster,
                    v.no_monopole,
                    if v.ordered { "ordered" } else { "NOT ordered" }
                );
            }
            let ordered = report.verdicts.iter().all(|v| v.ordered);
            emit(o, report)?;
            Ok(ordered)
        }
        Command::Bench(_) => {
            let n_list = if o.n.len() == 1 && !n_given { vec![1024, 2048, 4096] } else { o.n.clone() };
            let spec = WorkloadSpec { n: n_list[0], ..workload(o) };
            let cfg = grid(o, ablation).remove(0);
            let report = typed!(scaling_bench(&spec, &cfg, &n_list, o.budget, o.reps))?;
            emit(o, report)?;
            Ok(true)
        }
        Command::CausalBench(_) => {
            let cfg = grid(o, ablation).remove(0);
            let report = typed!(causal_bench(&workload(o), &cfg, o.block, o.seeds))?;
            emit(o, report)?;
            Ok(true)
        }
        Command::GenQkv(_) => {
            let spec = workload(o).with_seed(run_seeds(o.seed, 0).0);
            let out = o.out.as_ref().expect("validated");
            match dt {
                DType::F32 => save_qkv(out, &generate::<f32>(&spec)?)?,
                DType::F64 => save_qkv(out, &generate::<f64>(&spec)?)?,
            }
            eprintln!("wrote {} ({} {})", out.display(), spec.shape(), dt.name());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    if let Err(e) = validate(name, &cli.command, sub) {
        eprintln!("error: {e}\n\nFor more information, try 'muse {name} --help'.");
        return ExitCode::from(2);
    }
    let n_given = sub.value_source("n") == Some(ValueSource::CommandLine);
    let o = cli.command.opts();
    if let Some(t) = o.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {}", anyhow!(e).context("configuring the thread pool"));
            return ExitCode::FAILURE;
        }
    }
    match run(&cli.command, n_given).context(format!("{name} failed")) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
