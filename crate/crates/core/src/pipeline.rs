//! Three-phase training: alignment → multi-task → supervised fine-tuning.
//!
//! Each phase names the parameter groups it may update; everything else is
//! frozen and never written. The optimizer is SGD with optional momentum:
//!
//! ```text
//! g ← g · min(1, clip / ‖g‖)        (only when grad_clip is set)
//! v ← μ · v + g
//! θ ← θ − lr(θ) · v
//! ```
//!
//! where `lr(θ)` is the phase's base rate, decayed per encoder block by
//! [`layerwise_lr`]. Parameters that receive no gradient in a step (for
//! example visual experts on a text-only batch) are skipped entirely.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph};
use crate::data::{generate_sample, mix_seed, SampleKind};
use crate::error::{Error, Result};
use crate::fpid::PositionMode;
use crate::image::ImageDims;
use crate::merger::MergeSpec;
use crate::model::{Model, PromptPart};
use crate::params::{Group, ParamId, ParamSet};
use crate::tensor::Tensor;
use crate::vlm::text_targets;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Alignment,
    Multitask,
    Sft,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Alignment, Phase::Multitask, Phase::Sft];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Alignment => "alignment",
            Phase::Multitask => "multitask",
            Phase::Sft => "sft",
        }
    }

    pub fn default_groups(self) -> BTreeSet<Group> {
        match self {
            Phase::Alignment => [Group::Projector].into(),
            Phase::Multitask => [Group::Projector, Group::VisualExperts].into(),
            Phase::Sft => Group::ALL.into(),
        }
    }

    /// Data kind and whether an instruction prefix is used, for sample `index`.
    pub fn sample_spec(self, seed: u64, index: u64) -> (SampleKind, bool) {
        match self {
            Phase::Alignment => (SampleKind::ImageCaption, false),
            Phase::Multitask => {
                let kind = if mix_seed(seed ^ 0x5eed, index) & 1 == 0 {
                    SampleKind::ImageCaption
                } else {
                    SampleKind::VideoCaption
                };
                (kind, false)
            }
            Phase::Sft => (SampleKind::VideoCaption, true),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub trainable_groups: BTreeSet<Group>,
    pub base_lr: f64,
    pub encoder_layer_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub merge_window: usize,
    pub position_mode: PositionMode,
    pub seed: u64,
    pub momentum: f64,
    pub grad_clip: Option<f64>,
}

impl PhaseConfig {
    pub fn new(phase: Phase) -> Self {
        Self {
            phase,
            trainable_groups: phase.default_groups(),
            base_lr: 0.05,
            encoder_layer_decay: 0.5,
            steps: 10,
            batch_size: 2,
            merge_window: 2,
            position_mode: PositionMode::SharedFpid,
            seed: 0,
            momentum: 0.9,
            grad_clip: Some(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.trainable_groups;
        let ok = match self.phase {
            Phase::Alignment => *g == Phase::Alignment.default_groups(),
            Phase::Multitask => g.contains(&Group::Projector) && g.contains(&Group::VisualExperts),
            Phase::Sft => g.len() == Group::ALL.len(),
        };
        if !ok {
            let msg = match self.phase {
                Phase::Alignment => "alignment trains exactly {projector}",
                Phase::Multitask => "multitask must train at least projector and visual_experts",
                Phase::Sft => "sft trains every group",
            };
            return Err(Error::config("trainable_groups", msg));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::config("base_lr", "must be positive and finite"));
        }
        if !(self.encoder_layer_decay > 0.0 && self.encoder_layer_decay <= 1.0) {
            return Err(Error::config("encoder_layer_decay", "must lie in (0, 1]"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.merge_window == 0 {
            return Err(Error::config("merge_window", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config("grad_clip", "must be positive and finite"));
            }
        }
        Ok(())
    }

    pub fn trainable_mask(&self, params: &ParamSet) -> Vec<bool> {
        params.iter().map(|(_, p)| self.trainable_groups.contains(&p.group)).collect()
    }
}

/// `base_lr · decay^(n_layers − 1 − layer_index)`: the block nearest the
/// output gets `base_lr`, blocks nearer the input get geometrically less.
pub fn layerwise_lr(base_lr: f64, decay: f64, layer_index: usize, n_layers: usize) -> f64 {
    assert!(decay > 0.0 && decay <= 1.0, "decay must lie in (0, 1]");
    assert!(layer_index < n_layers, "layer index {layer_index} out of range for {n_layers} layers");
    base_lr * decay.powi((n_layers - 1 - layer_index) as i32)
}

/// Per-parameter learning rate for a phase.
pub fn param_lr(params: &ParamSet, id: ParamId, cfg: &PhaseConfig, encoder_layers: usize) -> f64 {
    match params.get(id).encoder_layer {
        Some(l) => layerwise_lr(cfg.base_lr, cfg.encoder_layer_decay, l, encoder_layers),
        None => cfg.base_lr,
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(momentum: f64, n_params: usize) -> Self {
        Self { momentum, velocity: vec![None; n_params] }
    }

    /// Applies one update to every parameter with a gradient and a `Some` rate.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, lr: impl Fn(ParamId) -> Option<f64>) {
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let (Some(g), Some(rate)) = (grads.get(id), lr(id)) else { continue };
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi + gi;
            }
            for (p, vi) in params.value_mut(id).data_mut().iter_mut().zip(v.data()) {
                *p -= rate * vi;
            }
        }
    }
}

/// Prompt for sample `index` of a phase's deterministic data stream.
pub fn phase_prompt(phase: Phase, seed: u64, index: u64, canvas: ImageDims) -> Vec<PromptPart> {
    let (kind, instruction) = phase.sample_spec(seed, index);
    generate_sample(mix_seed(seed, index), kind, canvas).prompt(instruction)
}

/// Samples produced on a worker thread and handed over through a bounded
/// queue. The sequence is fixed by the seed; only timing depends on the
/// producer.
pub struct DataStream {
    rx: Receiver<Vec<PromptPart>>,
    worker: Option<JoinHandle<()>>,
}

impl DataStream {
    pub fn spawn(phase: Phase, seed: u64, count: usize, canvas: ImageDims, capacity: usize) -> Self {
        let (tx, rx) = sync_channel(capacity.max(1));
        let worker = std::thread::spawn(move || {
            for i in 0..count as u64 {
                if tx.send(phase_prompt(phase, seed, i, canvas)).is_err() {
                    break;
                }
            }
        });
        Self { rx, worker: Some(worker) }
    }
}

impl Iterator for DataStream {
    type Item = Vec<PromptPart>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.recv().ok()
    }
}

impl Drop for DataStream {
    fn drop(&mut self) {
        // Unblock the producer before joining it.
        let (_, dead) = sync_channel(0);
        drop(std::mem::replace(&mut self.rx, dead));
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub tokens: usize,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: Phase,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub held_out_accuracy: Option<f64>,
    pub tokens_per_sec: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub correct: usize,
    pub predictions: usize,
    pub accuracy: f64,
    /// Sequence tokens processed, text and visual.
    pub tokens: usize,
    pub wall_time_s: f64,
}

/// Next-token accuracy (argmax) over the supervised text positions.
pub fn evaluate(model: &Model, prompts: &[Vec<PromptPart>], merge: MergeSpec, mode: PositionMode) -> Result<EvalStats> {
    if prompts.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    let start = Instant::now();
    let (mut correct, mut predictions, mut tokens) = (0, 0, 0);
    for prompt in prompts {
        let mut g = Graph::inference(&model.params);
        let fwd = model.forward(&mut g, prompt, merge, mode)?;
        let logits = g.value(fwd.logits);
        tokens += fwd.layout.len();
        for (r, t) in text_targets(&fwd.token_ids).iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = logits.row(r);
            let argmax = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            correct += usize::from(argmax == t);
            predictions += 1;
        }
    }
    if predictions == 0 {
        return Err(Error::contract("evaluation set has no supervised positions"));
    }
    Ok(EvalStats {
        correct,
        predictions,
        accuracy: correct as f64 / predictions as f64,
        tokens,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Mean loss and averaged gradients over one batch, accumulated in prompt order.
pub fn batch_gradients(
    model: &Model,
    batch: &[Vec<PromptPart>],
    trainable: &[bool],
    merge: MergeSpec,
    mode: PositionMode,
) -> Result<(f64, Gradients, usize)> {
    let mut grads = Gradients::empty(model.params.len());
    let mut loss_sum = 0.0;
    let mut tokens = 0;
    for prompt in batch {
        let mut g = Graph::with_trainable(&model.params, trainable.to_vec());
        let (loss, fwd) = model.loss(&mut g, prompt, merge, mode)?;
        loss_sum += g.value(loss).get(0, 0);
        tokens += fwd.layout.len();
        grads.accumulate(&g.backward(loss));
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((loss_sum / n, grads, tokens))
}

/// Trains `model` in place for `cfg.steps` steps drawn from `stream`.
pub fn run_phase(
    model: &mut Model,
    cfg: &PhaseConfig,
    stream: impl IntoIterator<Item = Vec<PromptPart>>,
    eval_set: &[Vec<PromptPart>],
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let trainable = cfg.trainable_mask(&model.params);
    let merge = MergeSpec::mean(cfg.merge_window);
    let enc_layers = model.config.encoder.n_layers;
    let rates: Vec<Option<f64>> = model
        .params
        .ids()
        .map(|id| trainable[id.index()].then(|| param_lr(&model.params, id, cfg, enc_layers)))
        .collect();
    let mut opt = Sgd::new(cfg.momentum, model.params.len());
    let mut stream = stream.into_iter();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut total_tokens = 0;

    for step in 0..cfg.steps {
        let batch: Vec<_> = stream.by_ref().take(cfg.batch_size).collect();
        if batch.len() < cfg.batch_size {
            return Err(Error::contract(format!("data stream ran dry at step {step} of phase {}", cfg.phase)));
        }
        let (loss, mut grads, tokens) = batch_gradients(model, &batch, &trainable, merge, cfg.position_mode)?;
        let grad_norm = grads.global_norm();
        if !loss.is_finite() || !grad_norm.is_finite() {
            let recent: Vec<f64> = losses.iter().rev().take(5).rev().copied().collect();
            return Err(Error::NonFiniteLoss {
                phase: cfg.phase.to_string(),
                step,
                dump: format!("loss={loss} grad_norm={grad_norm} recent_losses={recent:?} batch_tokens={tokens}"),
            });
        }
        if let Some(clip) = cfg.grad_clip {
            if grad_norm > clip {
                grads.scale(clip / grad_norm);
            }
        }
        opt.step(&mut model.params, &grads, |id| rates[id.index()]);
        total_tokens += tokens;
        losses.push(loss);
        on_step(&StepRecord {
            phase: cfg.phase,
            step,
            loss,
            grad_norm,
            tokens,
            elapsed_s: start.elapsed().as_secs_f64(),
        });
    }

    let train_time = start.elapsed().as_secs_f64();
    let held_out_accuracy = if eval_set.is_empty() {
        None
    } else {
        Some(evaluate(model, eval_set, merge, cfg.position_mode)?.accuracy)
    };
    Ok(TrainReport {
        phase: cfg.phase,
        steps: cfg.steps,
        losses,
        held_out_accuracy,
        tokens_per_sec: total_tokens as f64 / train_time.max(1e-9),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Loss at the first step and mean over the last `window` steps.
pub fn smoothed_loss_drop(losses: &[f64], window: usize) -> Option<(f64, f64)> {
    let first = *losses.first()?;
    let w = window.clamp(1, losses.len());
    let tail = &losses[losses.len() - w..];
    Some((first, tail.iter().sum::<f64>() / w as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layerwise_lr_examples() {
        assert_eq!(layerwise_lr(1e-3, 1.0, 0, 3), 1e-3);
        assert_eq!(layerwise_lr(1e-3, 1.0, 2, 3), 1e-3);
        assert_eq!([0, 1].map(|l| layerwise_lr(1e-3, 0.5, l, 2)), [5e-4, 1e-3]);
    }

    #[test]
    #[should_panic]
    fn layerwise_lr_rejects_out_of_range_layer() {
        layerwise_lr(1.0, 0.5, 2, 2);
    }

    #[test]
    fn phase_group_invariants() {
        for p in Phase::ALL {
            assert!(PhaseConfig::new(p).validate().is_ok());
        }
        let mut c = PhaseConfig::new(Phase::Alignment);
        c.trainable_groups.insert(Group::Encoder);
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "trainable_groups"));
        let mut c = PhaseConfig::new(Phase::Multitask);
        c.trainable_groups.remove(&Group::VisualExperts);
        assert!(c.validate().is_err());
        let mut c = PhaseConfig::new(Phase::Multitask);
        c.trainable_groups.insert(Group::Embeddings);
        assert!(c.validate().is_ok());
        let mut c = PhaseConfig::new(Phase::Sft);
        c.trainable_groups.remove(&Group::Encoder);
        assert!(c.validate().is_err());
        let mut c = PhaseConfig::new(Phase::Sft);
        c.encoder_layer_decay = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sgd_with_momentum_follows_update_rule() {
        let mut ps = ParamSet::new();
        let id = ps.register("w", Group::Projector, None, Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let unused = ps.register("u", Group::Projector, None, Tensor::from_vec(1, 1, vec![7.0]));
        let mut g = Graph::new(&ps);
        let w = g.param(id);
        let l = g.half_sum_squares(w);
        let grads = g.backward(l);
        let mut opt = Sgd::new(0.5, ps.len());
        opt.step(&mut ps, &grads, |_| Some(0.1));
        // v = g = [1, 2]; θ = [0.9, 1.8]
        assert_eq!(ps.value(id).data(), &[0.9, 1.8]);
        opt.step(&mut ps, &grads, |_| Some(0.1));
        // v = 0.5·[1, 2] + [1, 2] = [1.5, 3]; θ = [0.75, 1.5]
        let got = ps.value(id).data();
        assert!((got[0] - 0.75).abs() < 1e-15 && (got[1] - 1.5).abs() < 1e-15);
        assert_eq!(ps.value(unused).data(), &[7.0]);
    }

    #[test]
    fn stream_is_deterministic_and_bounded() {
        let canvas = ImageDims::square(24).unwrap();
        let a: Vec<_> = DataStream::spawn(Phase::Multitask, 5, 6, canvas, 2).collect();
        let b: Vec<_> = (0..6).map(|i| phase_prompt(Phase::Multitask, 5, i, canvas)).collect();
        assert_eq!(a, b);
        // Dropping a partially consumed stream must not hang.
        let mut s = DataStream::spawn(Phase::Sft, 1, 100, canvas, 1);
        assert!(s.next().is_some());
        drop(s);
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed_loss_drop(&[4.0, 3.0, 2.0, 1.0], 2), Some((4.0, 1.5)));
        assert_eq!(smoothed_loss_drop(&[], 2), None);
    }
}
