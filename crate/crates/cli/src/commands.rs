//! Subcommand flags and implementations.

use std::fmt::Write as _;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use rotavg::averaging::run_averaging;
use rotavg::envgraph::{GeneratorConfig, NeighborhoodMode};
use rotavg::io::{
    export_summary, export_trace, import_1dsfm, load_estimates, read_summary, save_env,
    save_estimates, ImportOptions, SummaryRow,
};
use rotavg::metrics::{absolute_error, avg_pairwise_error, relative_edge_error};
use rotavg::{Algorithm, Init, OptimizerConfig, RotationEnvironment};
use serde::Deserialize;

use crate::aggregate::{aggregate, render_table, write_aggregate_csv, write_text};
use crate::error::CliError;
use crate::source::{ensure_dir, generate, parse_seeds, EnvSource};

/// Above this the MRP step cap never engages in practice.
pub const INERT_ETA: f64 = 100.0;

#[derive(Debug, Parser)]
#[command(
    name = "rotavg",
    version,
    about = "Stochastic iterative rotation averaging benchmarks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate random kNN environments as env_<seed>.txt files.
    Gen(GenArgs),
    /// Optimize one environment with one algorithm.
    Run(RunArgs),
    /// Run an environment x algorithm x seed grid and aggregate it.
    Bench(BenchArgs),
    /// Rebuild aggregate tables from existing summary files.
    Aggregate(AggregateArgs),
    /// Convert a 1DSfM-style edge list into an environment file.
    Import(ImportArgs),
    /// Score a saved estimate set against an environment.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Neighborhood radius in radians; replaces the kNN rule when given.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Seed of the first environment; later ones use seed+1, seed+2, ...
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub count: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    /// Haar-uniform random rotations.
    Haar,
    Identity,
}

/// Optimizer flags shared by `run` and `bench`. Unset flags fall back to a
/// plan file, then to the library defaults.
#[derive(Clone, Debug, Default, Args)]
pub struct OptimizerFlags {
    /// Learning rate [default: 0.5]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Maximum MRP step before scaling by the learning rate [default: 0.1]
    #[arg(long)]
    pub eta: Option<f64>,
    /// Nodes updated per step [default: 8]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Number of batch steps [default: 300000]
    #[arg(long)]
    pub iters: Option<u64>,
    /// Steps between metric checkpoints [default: 1000]
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Initial estimates [default: haar]
    #[arg(long, value_enum)]
    pub init: Option<InitKind>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Environment file, or a generator spec like gen:n=100,k=3,seed=0
    #[arg(long)]
    pub env: EnvSource,
    #[arg(long)]
    pub algo: Algorithm,
    /// Seed for node sampling and the random initialization.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub opt: OptimizerFlags,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// TOML plan file; flags given on the command line take precedence.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Environment file or generator spec; repeatable.
    #[arg(long = "env")]
    pub envs: Vec<EnvSource>,
    /// Also generate this many environments with seeds gen-seed, gen-seed+1, ...
    #[arg(long)]
    pub gen_count: Option<u64>,
    #[arg(long)]
    pub gen_seed: Option<u64>,
    /// Nodes per generated environment [default: 100]
    #[arg(long)]
    pub n: Option<usize>,
    /// Neighbors per node in generated environments [default: 3]
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated algorithms [default: so3,quat,mrp]
    #[arg(long)]
    pub algos: Option<String>,
    /// Seed list such as 0-9 or 0,3,5 [default: 0]
    #[arg(long)]
    pub seeds: Option<String>,
    #[command(flatten)]
    pub opt: OptimizerFlags,
    /// Write every run's trace under <out>/traces/<env>/.
    #[arg(long)]
    pub traces: bool,
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "ROTAVG_JOBS", default_value_t = 0)]
    pub jobs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// summary.csv files to combine; repeatable.
    #[arg(long = "summary", required = true)]
    pub summaries: Vec<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Ground-truth rotations, one `i w x y z` row per node.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Reject rows with columns beyond the optional translation.
    #[arg(long)]
    pub strict: bool,
    /// The file stores R_ji instead of R_ij.
    #[arg(long)]
    pub transpose: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub env: EnvSource,
    #[arg(long)]
    pub estimates: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a).map(|_| ()),
        Command::Run(a) => cmd_run(&a).map(|_| ()),
        Command::Bench(a) => cmd_bench(&a).map(|_| ()),
        Command::Aggregate(a) => cmd_aggregate(&a),
        Command::Import(a) => cmd_import(&a),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
    }
}

pub fn cmd_gen(args: &GenArgs) -> Result<Vec<PathBuf>, CliError> {
    if args.n < 2 {
        return Err(CliError::usage(format!(
            "--n must be at least 2, got {}",
            args.n
        )));
    }
    ensure_dir(&args.out)?;
    let mut written = Vec::new();
    for seed in args.seed..args.seed + args.count {
        let cfg = GeneratorConfig {
            n_nodes: args.n,
            k_neighbors: args.k,
            seed,
            neighborhood_mode: args
                .eps
                .map_or(NeighborhoodMode::Knn, NeighborhoodMode::Epsilon),
        };
        let env = generate(&cfg)?;
        let path = args.out.join(format!("env_{seed}.txt"));
        save_env(&env, &path)?;
        println!(
            "{} ({} nodes, {} edges)",
            path.display(),
            env.n_nodes(),
            env.edges().len()
        );
        written.push(path);
    }
    Ok(written)
}

fn optimizer_config(
    flags: &OptimizerFlags,
    plan: &OptimizerFlags,
    algorithm: Algorithm,
    seed: u64,
) -> OptimizerConfig {
    let d = OptimizerConfig::default();
    let init = match flags.init.or(plan.init).unwrap_or(InitKind::Haar) {
        InitKind::Haar => Init::HaarRandom(seed),
        InitKind::Identity => Init::Identity,
    };
    OptimizerConfig {
        algorithm,
        gamma: flags.gamma.or(plan.gamma).unwrap_or(d.gamma),
        eta: flags.eta.or(plan.eta).unwrap_or(d.eta),
        batch_size: flags.batch.or(plan.batch).unwrap_or(d.batch_size),
        max_iters: flags.iters.or(plan.iters).unwrap_or(d.max_iters),
        seed,
        checkpoint_every: flags
            .checkpoint_every
            .or(plan.checkpoint_every)
            .unwrap_or(d.checkpoint_every),
        init,
    }
}

fn warn_about_flags(flags: &OptimizerFlags, algorithms: &[Algorithm]) {
    if let Some(eta) = flags.eta {
        if algorithms.contains(&Algorithm::Mrp) && eta > INERT_ETA {
            log::warn!("--eta {eta} is so large that the MRP step cap is effectively disabled");
        }
        if !algorithms.contains(&Algorithm::Mrp) {
            log::warn!("--eta only affects the mrp algorithm and is ignored here");
        }
    }
}

/// Output files of a single run.
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub trace: PathBuf,
    pub summary: PathBuf,
    pub estimates: PathBuf,
    pub row: SummaryRow,
}

pub fn cmd_run(args: &RunArgs) -> Result<RunOutputs, CliError> {
    let cfg = optimizer_config(&args.opt, &OptimizerFlags::default(), args.algo, args.seed);
    cfg.validate()?;
    warn_about_flags(&args.opt, &[args.algo]);
    let env = args.env.load()?;
    ensure_dir(&args.out)?;

    let result = run_averaging(&env, &cfg)?;
    let row = SummaryRow::from_run(args.env.name(), &cfg, &result.trace);
    let outputs = RunOutputs {
        trace: args
            .out
            .join(format!("trace_{}_{}.csv", args.algo, args.seed)),
        summary: args.out.join("summary.csv"),
        estimates: args
            .out
            .join(format!("estimates_{}_{}.txt", args.algo, args.seed)),
        row: row.clone(),
    };
    export_trace(&result.trace, &outputs.trace)?;
    export_summary(std::slice::from_ref(&row), &outputs.summary)?;
    save_estimates(&result.estimates.to_quaternions(), &outputs.estimates)?;
    println!("{}", describe_row(&row));
    Ok(outputs)
}

fn describe_row(row: &SummaryRow) -> String {
    let steps = row.steps_to_5deg.map_or_else(
        || "not converged".to_string(),
        |s| format!("{s} steps to 5 deg"),
    );
    let final_err = row.final_ape_mean_deg.unwrap_or(row.final_rel_mean_deg);
    format!(
        "{} {} seed {}: {steps}, nAUC {:.3}, final mean error {:.4} deg",
        row.env, row.algorithm, row.seed, row.nauc, final_err
    )
}

/// Plan file contents. Every key is optional and mirrors a `bench` flag.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub envs: Option<Vec<String>>,
    pub gen_count: Option<u64>,
    pub gen_seed: Option<u64>,
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub algos: Option<Vec<String>>,
    pub seeds: Option<SeedSpec>,
    pub gamma: Option<f64>,
    pub eta: Option<f64>,
    pub batch: Option<usize>,
    pub iters: Option<u64>,
    pub checkpoint_every: Option<u64>,
    pub init: Option<InitKind>,
    pub traces: Option<bool>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum SeedSpec {
    List(Vec<u64>),
    Text(String),
}

/// A fully resolved experiment grid.
#[derive(Clone, Debug)]
pub struct BenchPlan {
    pub envs: Vec<EnvSource>,
    pub algorithms: Vec<Algorithm>,
    pub seeds: Vec<u64>,
    /// Template for every cell; algorithm, seed and init seed are per cell.
    pub flags: OptimizerFlags,
    pub out: PathBuf,
    pub write_traces: bool,
}

impl BenchPlan {
    pub fn from_args(args: &BenchArgs) -> Result<Self, CliError> {
        let file = match &args.plan {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::file(format!("cannot read {}", path.display()), e))?;
                toml::from_str::<PlanFile>(&text)
                    .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
            }
            None => PlanFile::default(),
        };

        let mut envs = args.envs.clone();
        if args.envs.is_empty() {
            for s in file.envs.iter().flatten() {
                envs.push(s.parse().map_err(CliError::usage)?);
            }
        }
        let n = args.n.or(file.n).unwrap_or(100);
        let k = args.k.or(file.k).unwrap_or(3);
        let start = args.gen_seed.or(file.gen_seed).unwrap_or(0);
        let count = args.gen_count.or(file.gen_count).unwrap_or(0);
        envs.extend((start..start + count).map(|s| EnvSource::generated(n, k, s)));
        if envs.is_empty() {
            return Err(CliError::usage(
                "bench needs at least one --env or --gen-count",
            ));
        }

        let algorithms: Vec<Algorithm> = match (&args.algos, &file.algos) {
            (Some(list), _) => list.split(',').map(|s| s.trim().parse()).collect(),
            (None, Some(list)) => list.iter().map(|s| s.trim().parse()).collect(),
            (None, None) => Ok(Algorithm::ALL.to_vec()),
        }
        .map_err(CliError::usage)?;
        if algorithms.is_empty() {
            return Err(CliError::usage("algorithm list is empty"));
        }

        let seeds = match (&args.seeds, &file.seeds) {
            (Some(text), _) | (None, Some(SeedSpec::Text(text))) => {
                parse_seeds(text).map_err(CliError::usage)?
            }
            (None, Some(SeedSpec::List(list))) if !list.is_empty() => list.clone(),
            (None, Some(SeedSpec::List(_))) => return Err(CliError::usage("seed list is empty")),
            (None, None) => vec![0],
        };

        let plan_flags = OptimizerFlags {
            gamma: file.gamma,
            eta: file.eta,
            batch: file.batch,
            iters: file.iters,
            checkpoint_every: file.checkpoint_every,
            init: file.init,
        };
        let f = &args.opt;
        let flags = OptimizerFlags {
            gamma: f.gamma.or(plan_flags.gamma),
            eta: f.eta.or(plan_flags.eta),
            batch: f.batch.or(plan_flags.batch),
            iters: f.iters.or(plan_flags.iters),
            checkpoint_every: f.checkpoint_every.or(plan_flags.checkpoint_every),
            init: f.init.or(plan_flags.init),
        };
        Ok(Self {
            envs,
            algorithms,
            seeds,
            flags,
            out: args
                .out
                .clone()
                .or(file.out)
                .unwrap_or_else(|| PathBuf::from(".")),
            write_traces: args.traces || file.traces.unwrap_or(false),
        })
    }

    pub fn config(&self, algorithm: Algorithm, seed: u64) -> OptimizerConfig {
        optimizer_config(&self.flags, &OptimizerFlags::default(), algorithm, seed)
    }
}

/// One failed grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchFailure {
    pub env: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct BenchOutcome {
    pub rows: Vec<SummaryRow>,
    pub failures: Vec<BenchFailure>,
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

fn run_cell(
    plan: &BenchPlan,
    name: &str,
    env: &RotationEnvironment,
    algorithm: Algorithm,
    seed: u64,
) -> Result<SummaryRow, String> {
    let cfg = plan.config(algorithm, seed);
    let result = catch_unwind(AssertUnwindSafe(|| run_averaging(env, &cfg)))
        .map_err(panic_message)?
        .map_err(|e| e.to_string())?;
    if plan.write_traces {
        let dir = plan.out.join("traces").join(name);
        fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        export_trace(
            &result.trace,
            &dir.join(format!("trace_{algorithm}_{seed}.csv")),
        )
        .map_err(|e| e.to_string())?;
    }
    let row = SummaryRow::from_run(name, &cfg, &result.trace);
    log::info!("{}", describe_row(&row));
    Ok(row)
}

pub fn run_plan(plan: &BenchPlan, jobs: usize) -> Result<BenchOutcome, CliError> {
    for &alg in &plan.algorithms {
        plan.config(alg, 0).validate()?;
    }
    warn_about_flags(&plan.flags, &plan.algorithms);
    ensure_dir(&plan.out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;

    let names: Vec<String> = plan.envs.iter().map(EnvSource::name).collect();
    let loaded: Vec<Result<RotationEnvironment, String>> = pool.install(|| {
        plan.envs
            .par_iter()
            .map(|s| s.load().map_err(|e| e.to_string()))
            .collect()
    });
    let mut cells = Vec::new();
    for e in 0..plan.envs.len() {
        for &alg in &plan.algorithms {
            for &seed in &plan.seeds {
                cells.push((e, alg, seed));
            }
        }
    }
    let results: Vec<Result<SummaryRow, String>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(e, alg, seed)| match &loaded[e] {
                Ok(env) => run_cell(plan, &names[e], env, alg, seed),
                Err(reason) => Err(reason.clone()),
            })
            .collect()
    });

    let mut outcome = BenchOutcome {
        rows: Vec::new(),
        failures: Vec::new(),
    };
    for (&(e, algorithm, seed), res) in cells.iter().zip(results) {
        match res {
            Ok(row) => outcome.rows.push(row),
            Err(reason) => outcome.failures.push(BenchFailure {
                env: names[e].clone(),
                algorithm,
                seed,
                reason,
            }),
        }
    }
    Ok(outcome)
}

pub fn write_aggregates(rows: &[SummaryRow], out: &Path) -> Result<String, CliError> {
    let agg = aggregate(rows);
    write_aggregate_csv(&agg, &out.join("aggregate.csv"))?;
    let table = render_table(&agg);
    write_text(&out.join("aggregate.txt"), &table)?;
    Ok(table)
}

pub fn cmd_bench(args: &BenchArgs) -> Result<BenchOutcome, CliError> {
    let plan = BenchPlan::from_args(args)?;
    let outcome = run_plan(&plan, args.jobs)?;
    export_summary(&outcome.rows, &plan.out.join("summary.csv"))?;
    let table = write_aggregates(&outcome.rows, &plan.out)?;
    print!("{table}");

    let failures_path = plan.out.join("failures.txt");
    if outcome.failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path).map_err(|e| {
                CliError::file(format!("cannot remove {}", failures_path.display()), e)
            })?;
        }
        return Ok(outcome);
    }
    let mut text = String::new();
    for f in &outcome.failures {
        let _ = writeln!(text, "{} {} {}: {}", f.env, f.algorithm, f.seed, f.reason);
        log::error!(
            "run {} {} {} failed: {}",
            f.env,
            f.algorithm,
            f.seed,
            f.reason
        );
    }
    write_text(&failures_path, &text)?;
    Err(CliError::PartialBench {
        failed: outcome.failures.len(),
        total: outcome.failures.len() + outcome.rows.len(),
    })
}

pub fn cmd_aggregate(args: &AggregateArgs) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for path in &args.summaries {
        rows.extend(read_summary(path)?);
    }
    ensure_dir(&args.out)?;
    print!("{}", write_aggregates(&rows, &args.out)?);
    Ok(())
}

pub fn cmd_import(args: &ImportArgs) -> Result<(), CliError> {
    let opts = ImportOptions {
        strict: args.strict,
        transpose: args.transpose,
    };
    let (env, report) = import_1dsfm(&args.input, args.gt.as_deref(), opts)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    save_env(&env, &args.out)?;
    println!(
        "{}: {} nodes, {} edges ({} rows read; dropped {} non-rotation rows, {} self loops, \
         {} nodes without ground truth, {} nodes outside the largest component)",
        args.out.display(),
        env.n_nodes(),
        env.edges().len(),
        report.rows_read,
        report.dropped_non_rotation,
        report.dropped_self_loops,
        report.dropped_without_gt,
        report.dropped_outside_component,
    );
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<String, CliError> {
    let env = args.env.load()?;
    let quats = load_estimates(&args.estimates)?;
    if quats.len() != env.n_nodes() {
        return Err(CliError::usage(format!(
            "{} holds {} estimates but the environment has {} nodes",
            args.estimates.display(),
            quats.len(),
            env.n_nodes()
        )));
    }
    let est: Vec<_> = quats.iter().map(|q| q.to_matrix()).collect();
    let mut report = String::new();
    let _ = writeln!(report, "nodes {}", env.n_nodes());
    let _ = writeln!(report, "edges {}", env.edges().len());
    let rel = relative_edge_error(&est, &env);
    let _ = writeln!(report, "rel_mean_deg {}", rel.mean_deg);
    let _ = writeln!(report, "rel_median_deg {}", rel.median_deg);
    if let Some(gt) = env.ground_truth_matrices() {
        let ape = avg_pairwise_error(&est, gt);
        let abs = absolute_error(&est, gt);
        let _ = writeln!(report, "ape_mean_deg {}", ape.mean_deg);
        let _ = writeln!(report, "ape_median_deg {}", ape.median_deg);
        let _ = writeln!(report, "abs_mean_deg {}", abs.mean_deg);
        let _ = writeln!(report, "abs_median_deg {}", abs.median_deg);
    }
    print!("{report}");
    if let Some(path) = &args.out {
        write_text(path, &report)?;
    }
    Ok(report)
}
