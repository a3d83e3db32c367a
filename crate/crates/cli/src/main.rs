//! `blockmoe` — validation, benchmarking, routing statistics and toy training
//! for the block-sparse dropless MoE library.
//!
//! Exit codes: 0 success, 1 validation failure, 2 training divergence,
//! 64 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use blockmoe::moe::Preset;
use blockmoe::parallel::with_workers;
use blockmoe_cli::{bench, stats, train, validate, CmdError};
use blockmoe_cli::{EXIT_DIVERGENCE, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION_FAILURE};

#[derive(Parser)]
#[command(
    name = "blockmoe",
    version,
    about = "Block-sparse dropless MoE toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the oracle-backed validation suites.
    Validate(ValidateArgs),
    /// Benchmark a kernel (sdd|dsd|dds) or the full layer (dmoe) to CSV.
    Bench(BenchCliArgs),
    /// Expected token-drop statistics under a routing distribution.
    Stats(StatsArgs),
    /// Train the synthetic clustered-regression task.
    Train(TrainArgs),
}

#[derive(Args)]
struct ValidateArgs {
    /// Only run suites whose name contains this string.
    #[arg(long)]
    filter: Option<String>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Kernel worker threads.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct BenchCliArgs {
    /// One of: sdd, dsd, dds, dmoe.
    kind: String,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    /// Fraction of nonzero blocks for custom kernel shapes.
    #[arg(long, default_value_t = 0.3)]
    density: f64,
    /// Named model shape (xs|small|medium); implies layer-derived operands.
    #[arg(long)]
    preset: Option<String>,
    /// Tokens routed round-robin when a preset is used.
    #[arg(long, default_value_t = 512)]
    tokens: usize,
    /// Comma-separated block sizes to sweep.
    #[arg(long = "block-size", default_value = "128")]
    block_size: String,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    /// Untimed repetitions before measuring.
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Resolve and print the benchmark plan without running it.
    #[arg(long, default_value_t = false)]
    dry_run: bool,
    /// CSV output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long = "num-experts", default_value_t = 8)]
    num_experts: usize,
    #[arg(long, default_value_t = 512)]
    tokens: usize,
    /// Comma-separated capacity factors.
    #[arg(long = "capacity-factor", default_value = "1,1.5,2")]
    capacity_factor: String,
    /// uniform | zipf:<a> | onehot.
    #[arg(long, default_value = "uniform")]
    distribution: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Independent assignments to average over.
    #[arg(long, default_value_t = 16)]
    samples: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config with `model` and `task` sections; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// dropless | capacity:<f>.
    #[arg(long, default_value = "dropless")]
    mode: String,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    /// Overrides the task seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    /// Metrics CSV output path.
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

fn cmd_validate(args: ValidateArgs) -> Result<u8, CmdError> {
    let results = with_workers(args.workers, || {
        validate::run_suites(args.filter.as_deref(), args.seed)
    })?;
    for r in &results {
        println!("{}", r.render());
    }
    let passed = results.iter().filter(|r| r.passed()).count();
    if passed == results.len() {
        println!("validate: PASS ({passed}/{} suites)", results.len());
        Ok(EXIT_OK)
    } else {
        println!("validate: FAIL ({passed}/{} suites)", results.len());
        Ok(EXIT_VALIDATION_FAILURE)
    }
}

fn cmd_bench(args: BenchCliArgs) -> Result<u8, CmdError> {
    let preset = args
        .preset
        .as_deref()
        .map(|p| p.parse::<Preset>().map_err(CmdError::Usage))
        .transpose()?;
    let block_sizes = blockmoe_cli::parse_list::<usize>(&args.block_size, "block size")?;
    let bench_args = bench::BenchArgs {
        kind: args.kind,
        m: args.m,
        k: args.k,
        n: args.n,
        density: args.density,
        preset,
        tokens: args.tokens,
        block_sizes,
        reps: args.reps,
        warmup: args.warmup,
        seed: args.seed,
        dry_run: args.dry_run,
    };
    let lines = with_workers(args.workers, || bench::run(&bench_args))?;
    let body = lines.join("\n") + "\n";
    match &args.out {
        Some(path) => std::fs::write(path, &body)
            .map_err(|e| CmdError::Usage(format!("cannot write {}: {e}", path.display())))?,
        None => print!("{body}"),
    }
    Ok(EXIT_OK)
}

fn cmd_stats(args: StatsArgs) -> Result<u8, CmdError> {
    let factors = blockmoe_cli::parse_list::<f64>(&args.capacity_factor, "capacity factor")?;
    let dist: stats::Distribution = args.distribution.parse().map_err(CmdError::Usage)?;
    let report = stats::run(
        args.num_experts,
        args.tokens,
        &factors,
        dist,
        args.seed,
        args.samples,
    )?;
    print!("{report}");
    Ok(EXIT_OK)
}

fn cmd_train(args: TrainArgs) -> Result<u8, CmdError> {
    let cfg = train::load_config(args.config.as_deref())?;
    let mode = train::parse_mode(&args.mode)?;
    let csv = with_workers(args.workers, || {
        train::run(cfg, mode, args.steps, args.lr, args.seed)
    })?;
    std::fs::write(&args.out, &csv)
        .map_err(|e| CmdError::Usage(format!("cannot write {}: {e}", args.out.display())))?;
    println!(
        "train: wrote {} steps to {}",
        args.steps,
        args.out.display()
    );
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok {
                ExitCode::from(EXIT_OK)
            } else {
                ExitCode::from(EXIT_USAGE)
            };
        }
    };

    let outcome = match cli.command {
        Command::Validate(args) => cmd_validate(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Train(args) => cmd_train(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(CmdError::Divergence(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_DIVERGENCE)
        }
        Err(CmdError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
