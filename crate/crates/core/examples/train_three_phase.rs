//! Alignment, multi-task and fine-tuning phases on synthetic shape scenes,
//! followed by evaluation at the training and a coarser merge window.
//!
//!     cargo run --release --example train_three_phase -- [config.toml]
//!
//! Without a config a reduced run (small steps) is used; pass
//! `configs/default.toml` for the full schedule.

use mmvl::config::{PhaseSpec, TrainConfig};
use mmvl::driver::{evaluate_checkpoint, train};
use mmvl::pipeline::Phase;

fn main() -> mmvl::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig {
            out_dir: "runs/example".into(),
            eval_samples: 4,
            timing_frames: 4,
            phases: vec![
                PhaseSpec::new(Phase::Alignment, 6),
                PhaseSpec::new(Phase::Multitask, 6),
                PhaseSpec { base_lr: 0.02, ..PhaseSpec::new(Phase::Sft, 10) },
            ],
            ..TrainConfig::default()
        },
    };
    let summary = train(&cfg, &mut |line| eprintln!("{line}"))?;
    for p in &summary.phases {
        println!(
            "{:<10} loss {:.3} -> {:.3}  held-out acc {:.3}  {:.0} tok/s",
            p.phase.as_str(),
            p.initial_loss,
            p.final_smoothed_loss,
            p.held_out_accuracy.unwrap_or(f64::NAN),
            p.tokens_per_sec
        );
    }
    println!("loss ratio (final smoothed / step 0): {:.3}", summary.loss_ratio);

    let report = evaluate_checkpoint(&cfg, &summary.final_checkpoint)?;
    for w in &report.windows {
        println!(
            "eval window {}: {} tokens/view, accuracy {:.3}, median forward {:.3}s",
            w.window, w.visual_tokens_per_view, w.accuracy, w.forward_median_s
        );
    }
    Ok(())
}
