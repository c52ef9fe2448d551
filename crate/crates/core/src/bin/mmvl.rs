//! `mmvl budget | train | eval | gradcheck`
//!
//! JSON goes to stdout, diagnostics to stderr. Exit codes: 0 success,
//! 1 usage, 2 runtime error, 3 verification failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmvl::budget::{budget, BudgetArgs, BudgetInput};
use mmvl::config::TrainConfig;
use mmvl::driver::{evaluate_checkpoint, run_gradcheck, train};
use mmvl::glhr::SplitStrategy;

#[derive(Parser)]
#[command(name = "mmvl", version, about = "Desk-scale vision-language model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Token and position-id budget for an image or a frame sequence.
    Budget {
        /// Image size as HEIGHTxWIDTH, e.g. 672x672.
        #[arg(long, value_parser = parse_dims, conflicts_with = "frames", required_unless_present = "frames")]
        dims: Option<(usize, usize)>,
        /// Number of video frames (one view each).
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value = "ds12")]
        strategy: SplitStrategy,
        #[arg(long, default_value_t = 336)]
        tile: usize,
        #[arg(long, default_value_t = 14)]
        patch: usize,
        /// Tile cap for the dynamic strategies.
        #[arg(long)]
        max_patches: Option<usize>,
        #[arg(long, default_value_t = 1)]
        window: usize,
        #[arg(long, default_value_t = 0)]
        text_tokens: usize,
    },
    /// Run the configured training phases.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Held-out accuracy and forward timing of a checkpoint at each eval window.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `merge_window_eval`, comma separated.
        #[arg(long, value_delimiter = ',')]
        windows: Option<Vec<usize>>,
    },
    /// Finite-difference check of every parameter group.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Check a trained checkpoint instead of the fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HEIGHTxWIDTH")?;
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
    Ok((num(h)?, num(w)?))
}

fn load_config(path: Option<&PathBuf>) -> mmvl::Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn emit<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn run(cmd: Command) -> mmvl::Result<bool> {
    match cmd {
        Command::Budget { dims, frames, strategy, tile, patch, max_patches, window, text_tokens } => {
            let input = match (dims, frames) {
                (Some((h_px, w_px)), _) => BudgetInput::Image { h_px, w_px },
                (None, Some(count)) => BudgetInput::Frames { count },
                (None, None) => unreachable!("clap requires one of --dims or --frames"),
            };
            let args = BudgetArgs { input, strategy, tile_px: tile, patch_px: patch, max_patches, window, text_tokens };
            emit(&budget(&args)?);
            Ok(true)
        }
        Command::Train { config, out_dir } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(d) = out_dir {
                cfg.out_dir = d;
            }
            let summary = train(&cfg, &mut |line| eprintln!("{line}"))?;
            emit(&summary);
            Ok(true)
        }
        Command::Eval { checkpoint, config, windows } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(w) = windows {
                cfg.merge_window_eval = w;
            }
            emit(&evaluate_checkpoint(&cfg, &checkpoint)?);
            Ok(true)
        }
        Command::Gradcheck { config, checkpoint } => {
            let cfg = load_config(config.as_ref())?;
            let run = run_gradcheck(&cfg, checkpoint.as_deref())?;
            emit(&run);
            if !run.passed {
                eprintln!("gradient check failed");
            }
            Ok(run.passed)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
