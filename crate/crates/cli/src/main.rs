//! `n2c`: corrupt, train, denoise and evaluate from the command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use n2c::noise::NoiseKind;

#[derive(Debug, Parser)]
#[command(name = "n2c", version, about = "Self-supervised denoising from noisy images only")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write degraded copies of every image in a directory.
    Corrupt {
        #[arg(long, value_parser = parse_kind)]
        model: NoiseKind,
        /// Sigma (intensity units, `20/255` accepted), retention probability, or Poisson peak.
        #[arg(long, value_parser = parse_number)]
        param: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Train a network from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Denoise every image in a directory with a trained checkpoint.
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        /// Refinement iterations; defaults to the value stored in the checkpoint.
        #[arg(long)]
        refine_iters: Option<usize>,
        /// Refinement step size; defaults to the value stored in the checkpoint.
        #[arg(long)]
        alpha: Option<f32>,
    },
    /// Score predictions against references paired by file name.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// CSV report, or JSON lines when the name ends in `.jsonl`.
        #[arg(long)]
        report: PathBuf,
    },
    /// Generate a synthetic shapes corpus with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 20)]
        val_count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_kind(s: &str) -> Result<NoiseKind, String> {
    s.parse().map_err(|e: n2c::noise::NoiseError| e.to_string())
}

fn parse_number(s: &str) -> Result<f64, String> {
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("`{s}`: {e}"));
    let v = match s.split_once('/') {
        Some((a, b)) => num(a)? / num(b)?,
        None => num(s)?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not a finite number"))
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("N2C_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("N2C_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Corrupt {
            model,
            param,
            seed,
            input,
            output,
        } => commands::corrupt(model, param, seed, &input, &output),
        Command::Train { config, dry_run } => commands::train(&config, dry_run),
        Command::Denoise {
            checkpoint,
            input,
            output,
            refine_iters,
            alpha,
        } => commands::denoise(&checkpoint, &input, &output, refine_iters, alpha),
        Command::Eval {
            pred,
            reference,
            report,
        } => commands::eval(&pred, &reference, &report),
        Command::Synth {
            out,
            count,
            val_count,
            size,
            channels,
            seed,
        } => commands::synth(&out, count, val_count, size, channels, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
