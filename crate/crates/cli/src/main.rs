//! `ccflow`: dataset generation, training, evaluation and analysis sweeps.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use ccflow::model::Ablation;
use ccflow::{Error, Result};
use clap::{Args, Parser, Subcommand};

use crate::commands::Predictor;

#[derive(Parser)]
#[command(name = "ccflow", version, about = "Occupancy-flow forecasting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Named preset: womd-desk, av2-desk, micro, full-scale.
    #[arg(long, default_value = "womd-desk")]
    preset: String,
    /// TOML file overlaid on the preset.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PredictorArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Score the ground truth instead of a model.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        count: usize,
        /// Validation samples; defaults to a tenth of `count`.
        #[arg(long)]
        val_count: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// none, no_accumulation, direct_multiframe or no_input_flow.
        #[arg(long)]
        ablate: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Metrics on the validation split.
    Eval {
        #[command(flatten)]
        p: PredictorArgs,
        /// Feed only the last L input frames.
        #[arg(long)]
        input_len: Option<usize>,
    },
    /// Metrics against the number of input frames.
    SweepSeqlen {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated lengths; defaults to every length up to the history.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-waypoint metric curves as CSV and SVG.
    Curves {
        #[command(flatten)]
        p: PredictorArgs,
    },
    /// Occupancy density and flow-magnitude statistics of a dataset.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("CCFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("CCFLOW_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Gen {
            cfg,
            count,
            val_count,
            seed,
            out,
        } => {
            let c = config::load(&cfg.preset, cfg.config.as_deref())?;
            let manifest = commands::gen(&c, count, val_count, seed, &out)?;
            println!("{}", manifest.display());
        }
        Command::Train {
            cfg,
            data,
            out,
            ablate,
            epochs,
            batch_size,
            max_steps,
            seed,
        } => {
            let mut c = config::load(&cfg.preset, cfg.config.as_deref())?;
            if let Some(a) = ablate {
                c.model.ablation = Ablation::parse(&a)?;
            }
            if let Some(e) = epochs {
                c.train.epochs = e;
            }
            if let Some(b) = batch_size {
                c.train.batch_size = b;
            }
            if max_steps.is_some() {
                c.train.max_steps = max_steps;
            }
            if let Some(s) = seed {
                c.train.seed = s;
            }
            let outcome = commands::train(&c, &data, &out)?;
            match (&outcome.best_checkpoint, outcome.best_metric) {
                (Some(p), Some(m)) => println!("{} observed_auc={m}", p.display()),
                _ => println!("{}", outcome.log_path.display()),
            }
        }
        Command::Eval { p, input_len } => {
            let (pred, info) = Predictor::load(p.checkpoint.as_deref(), p.oracle)?;
            let r = commands::eval(&pred, info, &p.data, input_len, &p.out)?;
            println!(
                "observed_auc={} flow_epe={}",
                r.mean.observed_auc, r.mean.flow_epe
            );
        }
        Command::SweepSeqlen {
            data,
            checkpoint,
            lengths,
            out,
        } => {
            let (pred, info) = Predictor::load(Some(&checkpoint), false)?;
            let Predictor::Model(model) = pred else {
                unreachable!("checkpoint predictor")
            };
            let rows = commands::sweep_seqlen(&model, info, &data, lengths.as_deref(), &out)?;
            for r in rows {
                println!(
                    "{} L={} observed_auc={}",
                    r.mode.name(),
                    r.length,
                    r.report.mean.observed_auc
                );
            }
        }
        Command::Curves { p } => {
            let (pred, info) = Predictor::load(p.checkpoint.as_deref(), p.oracle)?;
            commands::curves(&pred, info, &p.data, &p.out)?;
            println!("{}", p.out.join("curves.csv").display());
        }
        Command::Stats { data, out } => {
            commands::stats(&data, &out)?;
            println!("{}", out.join("flow_histogram.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
