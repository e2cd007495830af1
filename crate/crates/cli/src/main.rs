use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tumorseg::cli::{self, RunContext};

/// Brain tumor segmentation with a frozen dense encoder.
#[derive(Parser, Debug)]
#[command(name = "tumorseg", version, about)]
struct Cli {
    /// Random seed (phantom generation, model initialization, sampling).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Single-threaded compute for bitwise-reproducible runs.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic multimodal cases with nested tumor labels.
    Phantom(PhantomArgs),
    /// Train on a directory of labeled cases.
    Train(TrainArgs),
    /// Segment every case in a directory.
    Predict(PredictArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Print a weight archive's manifest.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Volume extent as X,Y,Z.
    #[arg(long, default_value = "64,64,64", value_parser = parse_triple::<usize>)]
    shape: [usize; 3],
    /// Voxel spacing in millimetres as X,Y,Z.
    #[arg(long, default_value = "1,1,1", value_parser = parse_triple::<f64>)]
    spacing: [f64; 3],
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pretrained weights: a full checkpoint or an encoder-compatible archive.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the fused per-class probability volumes.
    #[arg(long)]
    probs: bool,
    /// Config file for the postprocessing keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use the n-1 standard deviation in the summary.
    #[arg(long)]
    sample_std: bool,
}

#[derive(Args, Debug)]
struct InspectArgs {
    archive: PathBuf,
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> std::result::Result<[T; 3], String>
where
    T::Err: std::fmt::Display,
{
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got {s:?}"));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|e| format!("{p:?}: {e}"))?);
    }
    out.try_into().map_err(|_| unreachable!())
}

fn configure_threads(cli: &Cli) -> Result<()> {
    let threads = match (cli.deterministic, cli.jobs) {
        (true, _) => 1,
        (false, Some(0)) => bail!("--jobs must be positive"),
        (false, Some(n)) => n,
        (false, None) => return Ok(()),
    };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().context("configuring the worker pool")
}

fn run(cli: Cli) -> Result<()> {
    configure_threads(&cli)?;
    let ctx = RunContext { seed: cli.seed, jobs: cli.jobs, deterministic: cli.deterministic };
    match cli.command {
        Command::Phantom(a) => {
            let ids = cli::cmd_phantom(&a.out, a.count, a.shape, a.spacing, &ctx)?;
            println!("wrote {} cases to {}", ids.len(), a.out.display());
        }
        Command::Train(a) => {
            let summary = cli::cmd_train(&a.data, &a.config, &a.out, a.weights.as_deref(), &ctx, |r| {
                eprintln!(
                    "epoch {:>4}  step {:>6}  lr {:.3e}  loss {:.4}  dice wt {:.3} tc {:.3} et {:.3}  {:.1}s",
                    r.epoch, r.step, r.lr, r.loss, r.dice_wt, r.dice_tc, r.dice_et, r.wall_time
                );
            })?;
            println!("final checkpoint {}", summary.final_checkpoint.display());
        }
        Command::Predict(a) => {
            let ids = cli::cmd_predict(&a.data, &a.weights, &a.out, a.probs, a.config.as_deref(), &ctx)?;
            println!("segmented {} cases into {}", ids.len(), a.out.display());
        }
        Command::Evaluate(a) => {
            let eval = cli::cmd_evaluate(&a.pred, &a.truth, &a.out, a.sample_std, &ctx)?;
            print!("{}", eval.table);
        }
        Command::Inspect(a) => print!("{}", cli::cmd_inspect(&a.archive)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
