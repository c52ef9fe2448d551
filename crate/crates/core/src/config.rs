//! Training configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/default"
//! merge_window_train = 2
//! merge_window_eval = [1, 3]
//!
//! [[phases]]
//! phase = "alignment"
//! steps = 40
//! ```
//!
//! Every key is optional except `phases`; unknown keys are rejected. See
//! `configs/default.toml` for the full set with defaults.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::mix_seed;
use crate::error::{Error, Result};
use crate::fpid::PositionMode;
use crate::gradcheck::GradCheckConfig;
use crate::image::ImageDims;
use crate::model::ModelConfig;
use crate::params::Group;
use crate::pipeline::{Phase, PhaseConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Side of the square synthetic canvas, in pixels.
    pub canvas_px: usize,
    /// Bound on samples buffered between producer and trainer.
    pub queue_capacity: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { canvas_px: 336, queue_capacity: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub phase: Phase,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_decay")]
    pub encoder_layer_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    /// Defaults to the phase's own group set.
    #[serde(default)]
    pub trainable_groups: Option<BTreeSet<Group>>,
}

fn default_batch() -> usize {
    4
}
fn default_lr() -> f64 {
    0.05
}
fn default_decay() -> f64 {
    0.8
}
fn default_momentum() -> f64 {
    0.9
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl PhaseSpec {
    pub fn new(phase: Phase, steps: usize) -> Self {
        Self {
            phase,
            steps,
            batch_size: default_batch(),
            base_lr: default_lr(),
            encoder_layer_decay: default_decay(),
            momentum: default_momentum(),
            grad_clip: default_clip(),
            trainable_groups: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub merge_window_train: usize,
    pub merge_window_eval: Vec<usize>,
    pub position_mode: PositionMode,
    /// Held-out samples per evaluation.
    pub eval_samples: usize,
    /// Timed forward passes per window, after one warmup.
    pub timing_runs: usize,
    /// Frames in the clip used for timing.
    pub timing_frames: usize,
    /// Skip phases whose checkpoint already exists in `out_dir`.
    pub resume: bool,
    pub phases: Vec<PhaseSpec>,
    pub gradcheck: GradCheckConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            merge_window_train: 2,
            merge_window_eval: vec![1, 3],
            position_mode: PositionMode::SharedFpid,
            eval_samples: 16,
            timing_runs: 5,
            timing_frames: 10,
            resume: false,
            phases: vec![
                PhaseSpec::new(Phase::Alignment, 40),
                PhaseSpec::new(Phase::Multitask, 60),
                PhaseSpec { base_lr: 0.02, ..PhaseSpec::new(Phase::Sft, 40) },
            ],
            gradcheck: GradCheckConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn canvas(&self) -> ImageDims {
        ImageDims { h_px: self.data.canvas_px, w_px: self.data.canvas_px }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.data.canvas_px < 16 {
            return Err(Error::config("data.canvas_px", "must be at least 16"));
        }
        if self.data.queue_capacity == 0 {
            return Err(Error::config("data.queue_capacity", "must be at least 1"));
        }
        if self.merge_window_train == 0 {
            return Err(Error::config("merge_window_train", "must be at least 1"));
        }
        if self.merge_window_eval.is_empty() || self.merge_window_eval.contains(&0) {
            return Err(Error::config("merge_window_eval", "must list at least one window, each at least 1"));
        }
        if self.timing_runs < 5 {
            return Err(Error::config("timing_runs", "must be at least 5"));
        }
        if self.timing_frames == 0 {
            return Err(Error::config("timing_frames", "must be at least 1"));
        }
        let gc = &self.gradcheck;
        if !(gc.epsilon > 0.0 && gc.tolerance > 0.0 && gc.floor > 0.0) {
            return Err(Error::config("gradcheck", "epsilon, tolerance and floor must be positive"));
        }
        if gc.coords_per_group < 20 {
            return Err(Error::config("gradcheck.coords_per_group", "must be at least 20"));
        }
        if gc.merge_window == 0 {
            return Err(Error::config("gradcheck.merge_window", "must be at least 1"));
        }
        if self.phases.is_empty() {
            return Err(Error::config("phases", "at least one phase is required"));
        }
        for pair in self.phases.windows(2) {
            if pair[1].phase <= pair[0].phase {
                return Err(Error::config(
                    "phases",
                    format!("phase `{}` may not follow `{}`; order is alignment, multitask, sft", pair[1].phase, pair[0].phase),
                ));
            }
        }
        for i in 0..self.phases.len() {
            self.phase_config(i).validate().map_err(|e| match e {
                Error::Config { field, message } => Error::config(format!("phases[{i}].{field}"), message),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Fully resolved configuration of phase `i`.
    pub fn phase_config(&self, i: usize) -> PhaseConfig {
        let s = &self.phases[i];
        PhaseConfig {
            phase: s.phase,
            trainable_groups: s.trainable_groups.clone().unwrap_or_else(|| s.phase.default_groups()),
            base_lr: s.base_lr,
            encoder_layer_decay: s.encoder_layer_decay,
            steps: s.steps,
            batch_size: s.batch_size,
            merge_window: self.merge_window_train,
            position_mode: self.position_mode,
            seed: mix_seed(self.seed, 1 + i as u64),
            momentum: s.momentum,
            grad_clip: s.grad_clip,
        }
    }

    /// Seed of the held-out evaluation stream, disjoint from training streams.
    pub fn eval_seed(&self) -> u64 {
        mix_seed(self.seed, 0xE7A1)
    }
}

/// Maps a TOML error to a config error naming the offending key.
fn toml_error(text: &str, e: &toml::de::Error) -> Error {
    let message = e.message().to_string();
    if let Some(name) = message.strip_prefix("unknown field `").and_then(|r| r.split('`').next()) {
        return Error::config(name, message.clone());
    }
    if let Some(name) = message.strip_prefix("missing field `").and_then(|r| r.split('`').next()) {
        return Error::config(name, message.clone());
    }
    let field = e
        .span()
        .and_then(|span| {
            let line_start = text[..span.start].rfind('\n').map_or(0, |p| p + 1);
            let line = &text[line_start..];
            let line = &line[..line.find('\n').unwrap_or(line.len())];
            line.split_once('=').map(|(k, _)| k.trim().to_string())
        })
        .filter(|k| !k.is_empty())
        .unwrap_or_else(|| "<document>".to_string());
    Error::config(field, message)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn shipped_default_file_matches_defaults() {
        let text = include_str!("../configs/default.toml");
        assert_eq!(TrainConfig::from_toml(text).unwrap(), TrainConfig::default());
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let cfg = TrainConfig::from_toml("[[phases]]\nphase = \"sft\"\nsteps = 3\n").unwrap();
        assert_eq!(cfg.phases.len(), 1);
        assert_eq!(cfg.phase_config(0).trainable_groups.len(), Group::ALL.len());
        assert_eq!(cfg.merge_window_eval, vec![1, 3]);
    }

    fn field_of(text: &str) -> String {
        match TrainConfig::from_toml(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(field_of("stepz = 3\n"), "stepz");
        assert_eq!(field_of("seed = \"abc\"\n"), "seed");
        assert_eq!(field_of("timing_runs = 2\n"), "timing_runs");
        assert_eq!(field_of("[[phases]]\nphase = \"alignment\"\nsteps = 1\nbase_lr = -1.0\n"), "phases[0].base_lr");
        assert_eq!(field_of("[[phases]]\nphase = \"alignment\"\n"), "steps");
        assert_eq!(
            field_of("[[phases]]\nphase = \"alignment\"\nsteps = 1\ntrainable_groups = [\"encoder\"]\n"),
            "phases[0].trainable_groups"
        );
    }

    #[test]
    fn phase_order_is_enforced() {
        let text = "[[phases]]\nphase = \"sft\"\nsteps = 1\n[[phases]]\nphase = \"alignment\"\nsteps = 1\n";
        assert_eq!(field_of(text), "phases");
        let dup = "[[phases]]\nphase = \"multitask\"\nsteps = 1\n[[phases]]\nphase = \"multitask\"\nsteps = 1\n";
        assert_eq!(field_of(dup), "phases");
    }

    #[test]
    fn phase_seeds_differ() {
        let cfg = TrainConfig::default();
        let seeds: BTreeSet<u64> = (0..3).map(|i| cfg.phase_config(i).seed).chain([cfg.eval_seed()]).collect();
        assert_eq!(seeds.len(), 4);
    }
}
