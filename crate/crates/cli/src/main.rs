use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lobit_cli::commands::{bench, eval, histogram, sweep, train};
use lobit_cli::dataset::DatasetSpec;
use lobit_cli::{configure_threads, CliError, Result, RunConfig};

/// Low-bitwidth CNN training, evaluation and kernel benchmarks.
#[derive(Parser)]
#[command(name = "lobit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics and checkpoints.
    Train(RunArgs),
    /// Report loss and accuracy of a checkpoint on the test split.
    Eval(EvalArgs),
    /// Train every (W,A,G) point of a grid and write sweep.csv.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Grid points `W,A,G[+first][+last]` separated by `;`.
        #[arg(long)]
        grid: String,
    },
    /// Time bit-plane GEMM against f64 for several operand widths.
    Bench(BenchArgs),
    /// Histogram of one layer's weights, activations or gradients.
    Histogram(HistogramArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key = value config file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    w_bits: Option<u32>,
    #[arg(long)]
    a_bits: Option<u32>,
    #[arg(long)]
    g_bits: Option<u32>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    quantize_first: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    quantize_last: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory or `synthetic[:key=value,...]`.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got '{kv}'")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        };
        push("w_bits", self.w_bits.map(|v| v.to_string()));
        push("a_bits", self.a_bits.map(|v| v.to_string()));
        push("g_bits", self.g_bits.map(|v| v.to_string()));
        push("quantize_first", self.quantize_first.map(|v| v.to_string()));
        push("quantize_last", self.quantize_last.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("data", self.data.clone());
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        RunConfig::from_sources(self.config.as_deref(), &overrides)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: String,
    /// Square side length images are resampled to.
    #[arg(long)]
    resize: Option<usize>,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Sizes `RxCxL`, comma separated.
    #[arg(long, default_value = "64x64x1024,128x128x2048")]
    sizes: String,
    /// Operand widths, comma separated; every pair is measured.
    #[arg(long, default_value = "1,2,4")]
    bits: String,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HistogramArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `conv1` ... `convN` or `fc`.
    #[arg(long)]
    layer: String,
    /// `weights`, `activations` or `gradients`.
    #[arg(long)]
    what: String,
    #[arg(long)]
    data: String,
    #[arg(long)]
    resize: Option<usize>,
    /// Samples fed through the network for activations and gradients.
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 32)]
    bins: usize,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let report = train::cmd_train(&cfg)?;
            println!(
                "final_accuracy={:.4} best_accuracy={:.4} out={}",
                report.final_accuracy,
                report.best_accuracy,
                cfg.out.display()
            );
        }
        Command::Eval(args) => {
            let data: DatasetSpec = args.data.parse()?;
            let r = eval::cmd_eval(&args.checkpoint, &data, args.resize, args.batch_size.max(1))?;
            println!("samples={} loss={:.6} accuracy={:.4}", r.samples, r.loss, r.accuracy);
        }
        Command::Sweep { run, grid } => {
            let cfg = run.resolve()?;
            let grid = sweep::parse_grid(&grid)?;
            let rows = sweep::cmd_sweep(&cfg, &grid)?;
            print!("{}", sweep::render(&rows));
        }
        Command::Bench(args) => {
            let sizes = args
                .sizes
                .split(',')
                .map(str::parse)
                .collect::<Result<Vec<bench::BenchSize>>>()?;
            let bits = args
                .bits
                .split(',')
                .map(|b| b.trim().parse::<u32>().map_err(|_| CliError::Config(format!("bad bitwidth '{b}'"))))
                .collect::<Result<Vec<_>>>()?;
            let rows = bench::run_bench(&sizes, &bits, args.repeats, args.seed)?;
            let text = bench::render(&rows);
            match args.out {
                Some(path) => std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?,
                None => print!("{text}"),
            }
        }
        Command::Histogram(args) => {
            let data: DatasetSpec = args.data.parse()?;
            let what: histogram::Quantity = args.what.parse()?;
            let h = histogram::cmd_histogram(
                &args.checkpoint,
                &args.layer,
                what,
                &data,
                args.resize,
                args.batch,
                args.bins,
                &args.out,
            )?;
            println!("nonzero_bins={} out={}", h.nonzero_bins(), args.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", e.to_string().lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lobit: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
