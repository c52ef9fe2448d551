//! Central finite differences against the analytic gradients of the tape.
//!
//! Coordinates are drawn per group from those with a nonzero analytic
//! gradient when the group has enough of them, so the check exercises real
//! signal instead of unused embedding rows. A group with too few live
//! coordinates is sampled uniformly over all of its scalars.

use std::fmt;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph};
use crate::data::{generate_sample, vocab, SampleKind};
use crate::error::Result;
use crate::fpid::PositionMode;
use crate::image::ImageDims;
use crate::merger::MergeSpec;
use crate::model::{Model, PromptPart};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckGroup {
    Encoder,
    Projector,
    Embeddings,
    TextQkv,
    VisualQkv,
    AttnOut,
    Ffn,
    Norms,
    LmHead,
}

impl CheckGroup {
    pub const ALL: [CheckGroup; 9] = [
        CheckGroup::Encoder,
        CheckGroup::Projector,
        CheckGroup::Embeddings,
        CheckGroup::TextQkv,
        CheckGroup::VisualQkv,
        CheckGroup::AttnOut,
        CheckGroup::Ffn,
        CheckGroup::Norms,
        CheckGroup::LmHead,
    ];

    /// Group of a model parameter, by name.
    pub fn of(name: &str) -> Option<CheckGroup> {
        let group = if name.starts_with("encoder.") {
            CheckGroup::Encoder
        } else if name.starts_with("projector.") {
            CheckGroup::Projector
        } else if name.starts_with("decoder.tok_embed") {
            CheckGroup::Embeddings
        } else if name.starts_with("decoder.lm_head") {
            CheckGroup::LmHead
        } else if name.starts_with("decoder.ln_f") {
            CheckGroup::Norms
        } else {
            let leaf = name.strip_prefix("decoder.layer")?.split_once('.')?.1;
            match leaf.split('.').next()? {
                "text_q" | "text_k" | "text_v" => CheckGroup::TextQkv,
                "visual_q" | "visual_k" | "visual_v" => CheckGroup::VisualQkv,
                "attn_out" => CheckGroup::AttnOut,
                "ffn_in" | "ffn_out" => CheckGroup::Ffn,
                "ln1" | "ln2" => CheckGroup::Norms,
                _ => return None,
            }
        };
        Some(group)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CheckGroup::Encoder => "encoder",
            CheckGroup::Projector => "projector",
            CheckGroup::Embeddings => "embeddings",
            CheckGroup::TextQkv => "text_qkv",
            CheckGroup::VisualQkv => "visual_qkv",
            CheckGroup::AttnOut => "attn_out",
            CheckGroup::Ffn => "ffn",
            CheckGroup::Norms => "norms",
            CheckGroup::LmHead => "lm_head",
        }
    }
}

impl fmt::Display for CheckGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Denominator floor in the relative error.
    pub floor: f64,
    pub coords_per_group: usize,
    pub seed: u64,
    pub merge_window: usize,
    pub position_mode: PositionMode,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-3,
            floor: 1e-6,
            coords_per_group: 20,
            seed: 0,
            merge_window: 2,
            position_mode: PositionMode::SharedFpid,
        }
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub coordinates: usize,
    /// Scalars in the group with a nonzero analytic gradient.
    pub live_scalars: usize,
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    pub passed: bool,
    /// Coordinates above tolerance.
    pub failures: Vec<CoordCheck>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub instance: String,
    pub epsilon: f64,
    pub tolerance: f64,
    pub loss: f64,
    pub groups: Vec<GroupCheck>,
    pub passed: bool,
    pub wall_time_s: f64,
}

impl GradCheckReport {
    pub fn group(&self, name: &str) -> Option<&GroupCheck> {
        self.groups.iter().find(|g| g.group == name)
    }
}

/// An image that splits into two views (global + one tile) with eight text tokens around it.
pub fn mixed_instance(seed: u64, tile: usize) -> Vec<PromptPart> {
    let canvas = ImageDims { h_px: tile, w_px: tile };
    let sample = generate_sample(seed, SampleKind::ImageCaption, canvas);
    let crate::data::Media::Image(img) = sample.media else { unreachable!("image kind yields an image") };
    vec![
        PromptPart::Text(vec![vocab::BOS, vocab::INSTR_DESCRIBE, vocab::INSTR_THE, vocab::IMAGE]),
        PromptPart::Image(img),
        PromptPart::Text(text_tokens(seed, 4)),
    ]
}

/// Eight text tokens and no media.
pub fn text_only_instance(seed: u64) -> Vec<PromptPart> {
    let mut ids = vec![vocab::BOS];
    ids.extend(text_tokens(seed, 7));
    vec![PromptPart::Text(ids)]
}

fn text_tokens(seed: u64, n: usize) -> Vec<usize> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47);
    (0..n).map(|_| rng.gen_range(vocab::COLOR..vocab::USED)).collect()
}

fn select_coords(
    params: &ParamSet,
    ids: &[ParamId],
    grads: &Gradients,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<(ParamId, usize)>, usize) {
    let mut live = Vec::new();
    for &id in ids {
        if let Some(g) = grads.get(id) {
            live.extend(g.data().iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| (id, i)));
        }
    }
    let n_live = live.len();
    let pool: Vec<(ParamId, usize)> = if n_live >= count {
        live
    } else {
        ids.iter().flat_map(|&id| (0..params.value(id).len()).map(move |i| (id, i))).collect()
    };
    let picked = sample(rng, pool.len(), count.min(pool.len())).into_vec();
    let mut coords: Vec<_> = picked.into_iter().map(|i| pool[i]).collect();
    coords.sort_unstable_by_key(|&(id, i)| (id.index(), i));
    (coords, n_live)
}

/// Checks `loss` on `work` against `grads` for the coordinates of one group.
#[allow(clippy::too_many_arguments)]
fn check_group(
    name: &str,
    ids: &[ParamId],
    work: &mut ParamSet,
    grads: &Gradients,
    cfg: &GradCheckConfig,
    tolerance: f64,
    rng: &mut ChaCha8Rng,
    loss: &mut dyn FnMut(&ParamSet) -> Result<f64>,
) -> Result<GroupCheck> {
    let (coords, live_scalars) = select_coords(work, ids, grads, cfg.coords_per_group, rng);
    let mut out = GroupCheck {
        group: name.to_string(),
        coordinates: coords.len(),
        live_scalars,
        max_rel_error: 0.0,
        max_abs_analytic: 0.0,
        max_abs_numeric: 0.0,
        passed: true,
        failures: Vec::new(),
    };
    for (id, i) in coords {
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
        let orig = work.value(id).data()[i];
        work.value_mut(id).data_mut()[i] = orig + cfg.epsilon;
        let plus = loss(work)?;
        work.value_mut(id).data_mut()[i] = orig - cfg.epsilon;
        let minus = loss(work)?;
        work.value_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.epsilon);
        let rel = relative_error(analytic, numeric, cfg.floor);
        out.max_rel_error = out.max_rel_error.max(rel);
        out.max_abs_analytic = out.max_abs_analytic.max(analytic.abs());
        out.max_abs_numeric = out.max_abs_numeric.max(numeric.abs());
        if !(rel <= tolerance) {
            out.passed = false;
            out.failures.push(CoordCheck { param: work.get(id).name.clone(), index: i, analytic, numeric, rel_error: rel });
        }
    }
    Ok(out)
}

/// Full-model check of the caption loss on `prompt`, every group.
pub fn grad_check(model: &Model, prompt: &[PromptPart], instance: &str, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let start = Instant::now();
    let merge = MergeSpec::mean(cfg.merge_window);
    let mut g = Graph::new(&model.params);
    let (loss_var, _) = model.loss(&mut g, prompt, merge, cfg.position_mode)?;
    let loss = g.value(loss_var).get(0, 0);
    let grads = g.backward(loss_var);
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = model.params.clone();
    let mut eval = |p: &ParamSet| model.loss_value(p, prompt, merge, cfg.position_mode);
    let mut groups = Vec::new();
    for group in CheckGroup::ALL {
        let ids: Vec<ParamId> =
            model.params.iter().filter(|(_, p)| CheckGroup::of(&p.name) == Some(group)).map(|(id, _)| id).collect();
        if ids.is_empty() {
            continue;
        }
        groups.push(check_group(group.as_str(), &ids, &mut work, &grads, cfg, cfg.tolerance, &mut rng, &mut eval)?);
    }
    let passed = groups.iter().all(|g| g.passed);
    Ok(GradCheckReport {
        instance: instance.to_string(),
        epsilon: cfg.epsilon,
        tolerance: cfg.tolerance,
        loss,
        groups,
        passed,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// The projector on its own under `½‖X·W + b‖²`, where finite differences
/// are exact up to rounding. Checked at `tolerance` (1e-8 is comfortable).
pub fn projector_check(model: &Model, features: &Tensor, cfg: &GradCheckConfig, tolerance: f64) -> Result<GroupCheck> {
    let proj = model.projector.clone();
    let loss_of = |p: &ParamSet| -> Result<f64> { Ok(0.5 * proj.project(p, features)?.sum_squares()) };
    let mut g = Graph::new(&model.params);
    let x = g.constant(features.clone());
    let y = proj.project_var(&mut g, x);
    let l = g.half_sum_squares(y);
    let grads = g.backward(l);
    drop(g);
    let ids = [proj.weight, proj.bias];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = model.params.clone();
    let mut eval = |p: &ParamSet| loss_of(p);
    check_group("projector", &ids, &mut work, &grads, cfg, tolerance, &mut rng, &mut eval)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_model_parameter_has_a_group() {
        let model = Model::new(tiny_config(), 0).unwrap();
        for (_, p) in model.params.iter() {
            assert!(CheckGroup::of(&p.name).is_some(), "{} unclassified", p.name);
        }
        assert_eq!(CheckGroup::of("decoder.layer3.visual_k.bias"), Some(CheckGroup::VisualQkv));
        assert_eq!(CheckGroup::of("decoder.layer0.ln2.gamma"), Some(CheckGroup::Norms));
        assert_eq!(CheckGroup::of("mystery"), None);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
        assert_eq!(relative_error(0.0, 1e-9, 1e-6), 1e-3);
    }

    fn tiny_config() -> crate::model::ModelConfig {
        let mut c = crate::model::ModelConfig::default();
        c.encoder.tile_px = 28;
        c.encoder.patch_px = 7;
        c.encoder.d_v = 8;
        c.encoder.n_heads = 2;
        c.decoder.d_m = 8;
        c.decoder.n_layers = 1;
        c.decoder.n_heads = 2;
        c.decoder.vocab = 80;
        c
    }

    #[test]
    fn tiny_model_passes() {
        let model = Model::new(tiny_config(), 3).unwrap();
        let cfg = GradCheckConfig { coords_per_group: 6, ..Default::default() };
        let r = grad_check(&model, &mixed_instance(1, 28), "mixed", &cfg).unwrap();
        assert!(r.passed, "{r:#?}");
        assert_eq!(r.groups.len(), CheckGroup::ALL.len());
    }

    #[test]
    fn text_only_leaves_visual_experts_untouched() {
        let model = Model::new(tiny_config(), 3).unwrap();
        let cfg = GradCheckConfig { coords_per_group: 6, ..Default::default() };
        let r = grad_check(&model, &text_only_instance(2), "text_only", &cfg).unwrap();
        let ve = r.group("visual_qkv").unwrap();
        assert_eq!((ve.live_scalars, ve.max_abs_analytic, ve.max_abs_numeric), (0, 0.0, 0.0));
    }

    #[test]
    fn projector_alone_is_exact() {
        use rand::SeedableRng;
        let model = Model::new(tiny_config(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::uniform(5, 8, 1.0, &mut rng);
        let r = projector_check(&model, &x, &GradCheckConfig::default(), 1e-8).unwrap();
        assert!(r.passed && r.coordinates == 20, "{r:#?}");
    }
}
