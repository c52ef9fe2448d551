//! End-to-end drivers: multi-phase training with checkpoints, checkpoint
//! evaluation across merge windows, and the gradient-check run.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::{generate_sample, render_motion, vocab, SampleKind, Scene};
use crate::error::{Error, Result};
use crate::fpid::PositionMode;
use crate::gradcheck::{grad_check, mixed_instance, projector_check, text_only_instance, GradCheckReport, GroupCheck};
use crate::merger::{merged_token_count, MergeSpec};
use crate::model::{Model, PromptPart};
use crate::params::Group;
use crate::pipeline::{evaluate, phase_prompt, run_phase, smoothed_loss_drop, DataStream, Phase, StepRecord, TrainReport};
use crate::tensor::Tensor;

/// Steps averaged for the final smoothed loss.
pub const SMOOTHING_WINDOW: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Report(TrainReport),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: Phase,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub resumed: bool,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_smoothed_loss: f64,
    pub held_out_accuracy: Option<f64>,
    pub tokens_per_sec: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub phases: Vec<PhaseSummary>,
    pub final_checkpoint: PathBuf,
    /// Loss at the very first step of the run.
    pub initial_loss: f64,
    /// Mean loss over the last steps of the last phase.
    pub final_smoothed_loss: f64,
    pub loss_ratio: f64,
    pub wall_time_s: f64,
}

pub fn checkpoint_path(out_dir: &Path, index: usize, phase: Phase) -> PathBuf {
    out_dir.join(format!("{index}_{phase}.mmda"))
}

fn log_path(out_dir: &Path, index: usize, phase: Phase) -> PathBuf {
    out_dir.join(format!("{index}_{phase}.jsonl"))
}

fn held_out(cfg: &TrainConfig, phase: Phase) -> Vec<Vec<PromptPart>> {
    (0..cfg.eval_samples as u64).map(|i| phase_prompt(phase, cfg.eval_seed(), i, cfg.canvas())).collect()
}

fn read_report(path: &Path) -> Result<TrainReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut last = None;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if let Ok(LogRecord::Report(r)) = serde_json::from_str(&line) {
            last = Some(r);
        }
    }
    last.ok_or_else(|| Error::Checkpoint(format!("{} has no report record", path.display())))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Runs every configured phase in order, writing one checkpoint and one
/// JSONL log per phase into `cfg.out_dir`. Progress goes to `progress`.
pub fn train(cfg: &TrainConfig, progress: &mut dyn FnMut(&str)) -> Result<TrainSummary> {
    cfg.validate()?;
    let start = Instant::now();
    let out = cfg.out_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut experts_trained = false;
    let mut phases = Vec::new();
    let mut all_losses = Vec::new();

    for (i, spec) in cfg.phases.iter().enumerate() {
        let pc = cfg.phase_config(i);
        let ckpt = checkpoint_path(out, i, spec.phase);
        let log = log_path(out, i, spec.phase);
        let resumed = cfg.resume && ckpt.exists() && log.exists();
        let report = if resumed {
            checkpoint::load_into(&ckpt, &mut model.params)?;
            progress(&format!("phase {}: resumed from {}", spec.phase, ckpt.display()));
            read_report(&log)?
        } else {
            if pc.trainable_groups.contains(&Group::VisualExperts) && !experts_trained {
                model.decoder.copy_text_qkv_into_experts(&mut model.params);
            }
            let file = File::create(&log).map_err(|e| Error::io(&log, e))?;
            let mut writer = BufWriter::new(file);
            let mut io_err = None;
            let stream = DataStream::spawn(
                spec.phase,
                pc.seed,
                pc.steps * pc.batch_size,
                cfg.canvas(),
                cfg.data.queue_capacity,
            );
            let eval = held_out(cfg, spec.phase);
            let report = run_phase(&mut model, &pc, stream, &eval, |rec| {
                if rec.step % 10 == 0 || rec.step + 1 == pc.steps {
                    progress(&format!("phase {} step {:>4} loss {:.4}", rec.phase, rec.step, rec.loss));
                }
                let line = serde_json::to_string(&LogRecord::Step(rec.clone())).expect("record serializes");
                if let Err(e) = writeln!(writer, "{line}") {
                    io_err.get_or_insert(e);
                }
            })?;
            let line = serde_json::to_string(&LogRecord::Report(report.clone())).expect("report serializes");
            writeln!(writer, "{line}").and_then(|_| writer.flush()).map_err(|e| Error::io(&log, e))?;
            if let Some(e) = io_err {
                return Err(Error::io(&log, e));
            }
            write_atomic(&ckpt, &checkpoint::encode(&model.params))?;
            report
        };
        experts_trained |= pc.trainable_groups.contains(&Group::VisualExperts);
        let (initial, smoothed) = smoothed_loss_drop(&report.losses, SMOOTHING_WINDOW)
            .ok_or_else(|| Error::Checkpoint(format!("phase {} report has no losses", spec.phase)))?;
        all_losses.extend_from_slice(&report.losses);
        phases.push(PhaseSummary {
            phase: spec.phase,
            checkpoint: ckpt,
            log,
            resumed,
            steps: report.steps,
            initial_loss: initial,
            final_smoothed_loss: smoothed,
            held_out_accuracy: report.held_out_accuracy,
            tokens_per_sec: report.tokens_per_sec,
            wall_time_s: report.wall_time_s,
        });
    }

    let (initial_loss, final_smoothed_loss) =
        smoothed_loss_drop(&all_losses, SMOOTHING_WINDOW).expect("at least one phase ran");
    let summary = TrainSummary {
        seed: cfg.seed,
        final_checkpoint: phases.last().expect("at least one phase").checkpoint.clone(),
        phases,
        initial_loss,
        final_smoothed_loss,
        loss_ratio: final_smoothed_loss / initial_loss,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_vec_pretty(&summary).expect("summary serializes");
    write_atomic(&out.join("summary.json"), &json)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub window: usize,
    pub visual_tokens_per_view: usize,
    pub accuracy: f64,
    pub correct: usize,
    pub predictions: usize,
    pub tokens_per_sec: f64,
    /// Views in the timing clip.
    pub timing_views: usize,
    pub forward_median_s: f64,
    pub forward_times_s: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub samples: usize,
    pub windows: Vec<WindowMetrics>,
}

/// A clip of `frames` frames of one moving shape.
pub fn timing_clip(seed: u64, frames: usize, canvas: crate::image::ImageDims) -> Vec<PromptPart> {
    let Scene::Motion { object, direction, .. } = generate_sample(seed, SampleKind::VideoCaption, canvas).scene else {
        unreachable!("video kind yields a motion scene")
    };
    vec![
        PromptPart::Text(vec![vocab::BOS, vocab::VIDEO]),
        PromptPart::Video(render_motion(object, direction, frames, canvas)),
        PromptPart::Text(vec![vocab::SEP]),
    ]
}

/// Wall time of `runs` forward passes after one untimed warmup.
pub fn time_forward(
    model: &Model,
    prompt: &[PromptPart],
    merge: MergeSpec,
    runs: usize,
    mode: PositionMode,
) -> Result<Vec<f64>> {
    let once = || -> Result<f64> {
        let t = Instant::now();
        let mut g = Graph::inference(&model.params);
        let fwd = model.forward(&mut g, prompt, merge, mode)?;
        std::hint::black_box(g.value(fwd.logits).get(0, 0));
        Ok(t.elapsed().as_secs_f64())
    };
    once()?;
    (0..runs).map(|_| once()).collect()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Evaluates a model on the held-out mixed image/video stream at each window.
pub fn evaluate_model(model: &Model, cfg: &TrainConfig, checkpoint: &Path) -> Result<EvalReport> {
    let prompts = held_out(cfg, Phase::Multitask);
    if prompts.is_empty() {
        return Err(Error::contract("evaluation set is empty (eval_samples = 0)"));
    }
    let clip = timing_clip(cfg.eval_seed(), cfg.timing_frames, cfg.canvas());
    let side = cfg.model.encoder.grid_side();
    let mut windows = Vec::new();
    for &w in &cfg.merge_window_eval {
        let merge = MergeSpec::mean(w);
        let stats = evaluate(model, &prompts, merge, cfg.position_mode)?;
        let times = time_forward(model, &clip, merge, cfg.timing_runs, cfg.position_mode)?;
        windows.push(WindowMetrics {
            window: w,
            visual_tokens_per_view: merged_token_count(side, w),
            accuracy: stats.accuracy,
            correct: stats.correct,
            predictions: stats.predictions,
            tokens_per_sec: stats.tokens as f64 / stats.wall_time_s.max(1e-9),
            timing_views: cfg.timing_frames,
            forward_median_s: median(&times),
            forward_times_s: times,
        });
    }
    Ok(EvalReport { checkpoint: checkpoint.to_path_buf(), samples: prompts.len(), windows })
}

pub fn evaluate_checkpoint(cfg: &TrainConfig, checkpoint: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    checkpoint::load_into(checkpoint, &mut model.params)?;
    evaluate_model(&model, cfg, checkpoint)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRun {
    pub mixed: GradCheckReport,
    pub text_only: GradCheckReport,
    pub projector_alone: GroupCheck,
    /// Text-only analytic gradient of every sampled visual-expert coordinate is exactly zero.
    pub text_only_visual_qkv_zero: bool,
    pub passed: bool,
}

/// Finite-difference bound for the visual experts on a text-only sample.
pub const TEXT_ONLY_FD_BOUND: f64 = 1e-9;
pub const PROJECTOR_TOLERANCE: f64 = 1e-8;

/// Full gradient check on the fresh model of `cfg` (or a checkpoint).
pub fn run_gradcheck(cfg: &TrainConfig, checkpoint: Option<&Path>) -> Result<GradCheckRun> {
    cfg.validate()?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    if let Some(p) = checkpoint {
        checkpoint::load_into(p, &mut model.params)?;
    }
    let gc = &cfg.gradcheck;
    let mixed = grad_check(&model, &mixed_instance(gc.seed, cfg.model.encoder.tile_px), "mixed_2view_8text", gc)?;
    let text_only = grad_check(&model, &text_only_instance(gc.seed), "text_only_8", gc)?;
    let ve = text_only.group("visual_qkv").expect("model has visual experts");
    let text_only_visual_qkv_zero =
        ve.live_scalars == 0 && ve.max_abs_analytic == 0.0 && ve.max_abs_numeric <= TEXT_ONLY_FD_BOUND;
    let features = {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(gc.seed);
        Tensor::uniform(6, cfg.model.encoder.d_v, 1.0, &mut rng)
    };
    let projector_alone = projector_check(&model, &features, gc, PROJECTOR_TOLERANCE)?;
    let passed = mixed.passed && text_only.passed && text_only_visual_qkv_zero && projector_alone.passed;
    Ok(GradCheckRun { mixed, text_only, projector_alone, text_only_visual_qkv_zero, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn log_records_are_tagged() {
        let r = LogRecord::Step(StepRecord { phase: Phase::Sft, step: 1, loss: 2.0, grad_norm: 0.5, tokens: 9, elapsed_s: 0.1 });
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.starts_with("{\"record\":\"step\",\"phase\":\"sft\""), "{s}");
        assert_eq!(serde_json::from_str::<LogRecord>(&s).unwrap(), r);
    }
}
