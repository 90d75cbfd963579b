use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use dbn_core::bench::bench_kernels;
use dbn_core::harness::{parse_arch, run_experiment, ExperimentConfig};
use dbn_core::ParallelPolicy;

/// Train a deep belief network on MNIST, or benchmark the matmul kernel.
#[derive(Debug, Parser)]
#[command(name = "dbn", version)]
struct Cli {
    /// Hidden layer sizes, e.g. "1000, 500" or "9 x 1000".
    #[arg(long, default_value = "500,300")]
    arch: String,
    /// Directory holding the four uncompressed MNIST IDX files.
    #[arg(long, default_value = "data/mnist")]
    data_dir: PathBuf,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr_start: f64,
    #[arg(long, default_value_t = 1e-6)]
    lr_end: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Greedy RBM pretraining before fine-tuning (default).
    #[arg(long, overrides_with = "no_pretrain")]
    pretrain: bool,
    /// Start fine-tuning from a uniform random network instead.
    #[arg(long, overrides_with = "pretrain")]
    no_pretrain: bool,
    #[arg(long, default_value_t = 10)]
    pretrain_epochs: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Use only the first N training samples.
    #[arg(long, value_name = "N")]
    limit_train: Option<usize>,
    /// Use only the first N validation samples.
    #[arg(long, value_name = "N")]
    limit_valid: Option<usize>,
    /// Samples held out from the end of the training file for validation.
    #[arg(long, default_value_t = 10_000)]
    valid_count: usize,
    /// Evaluate the test set after every epoch as well.
    #[arg(long)]
    track_test: bool,
    #[arg(long)]
    quiet: bool,

    /// Run the matmul benchmark instead of training.
    #[arg(long)]
    bench: bool,
    /// Square matmul sizes to benchmark.
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024")]
    bench_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    bench_threads: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    bench_runs: usize,
}

fn run_bench(cli: &Cli) -> Result<(), String> {
    if cli.bench_threads.contains(&0) {
        return Err("--bench-threads values must be positive".into());
    }
    let policies: Vec<ParallelPolicy> = cli.bench_threads.iter().map(|&t| ParallelPolicy::with_threads(t)).collect();
    let shapes: Vec<(usize, usize, usize)> = cli.bench_sizes.iter().map(|&s| (s, s, s)).collect();
    let report = bench_kernels(&policies, &shapes, cli.bench_runs);
    print!("{}", report.to_csv_string());
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| format!("{}: {e}", cli.out_dir.display()))?;
    let path = cli.out_dir.join("bench.csv");
    report.save(&path).map_err(|e| format!("{}: {e}", path.display()))
}

fn run(cli: &Cli) -> Result<(), String> {
    if cli.bench {
        return run_bench(cli);
    }
    let cfg = ExperimentConfig {
        arch: parse_arch(&cli.arch).map_err(|e| format!("--arch: {e}"))?,
        data_dir: cli.data_dir.clone(),
        out_dir: cli.out_dir.clone(),
        epochs: cli.epochs,
        lr_start: cli.lr_start,
        lr_end: cli.lr_end,
        weight_decay: cli.weight_decay,
        seed: cli.seed,
        pretrain: !cli.no_pretrain,
        pretrain_epochs: cli.pretrain_epochs,
        threads: cli.threads,
        limit_train: cli.limit_train,
        limit_valid: cli.limit_valid,
        validation_count: cli.valid_count,
        track_test: cli.track_test,
        verbose: !cli.quiet,
    };
    let summary = run_experiment(&cfg).map_err(|e| e.to_string())?;
    print!("{}", summary.to_text());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
