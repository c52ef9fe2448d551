#![allow(dead_code)]

use std::path::Path;

use mmvl::config::{DataConfig, PhaseSpec, TrainConfig};
use mmvl::data::{generate_sample, vocab, SampleKind};
use mmvl::image::{ImageDims, RasterImage};
use mmvl::model::{Model, ModelConfig, PromptPart};
use mmvl::params::Group;
use mmvl::pipeline::Phase;
use mmvl::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 56 px tiles of 14 px patches: a 4×4 token grid per view.
pub fn tiny_model_config() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.encoder.tile_px = 56;
    c.encoder.d_v = 16;
    c.encoder.n_heads = 2;
    c.decoder.d_m = 32;
    c.decoder.n_layers = 2;
    c.decoder.n_heads = 2;
    c.decoder.vocab = 80;
    c
}

pub fn tiny_model(seed: u64) -> Model {
    Model::new(tiny_model_config(), seed).unwrap()
}

pub fn tiny_train_config(out_dir: &Path) -> TrainConfig {
    TrainConfig {
        seed: 11,
        out_dir: out_dir.to_path_buf(),
        model: tiny_model_config(),
        data: DataConfig { canvas_px: 56, queue_capacity: 2 },
        eval_samples: 3,
        timing_frames: 2,
        phases: vec![
            PhaseSpec::new(Phase::Alignment, 3),
            PhaseSpec::new(Phase::Multitask, 3),
            PhaseSpec { base_lr: 0.02, ..PhaseSpec::new(Phase::Sft, 3) },
        ],
        ..TrainConfig::default()
    }
    .with_batch(2)
}

pub trait WithBatch {
    fn with_batch(self, b: usize) -> Self;
}

impl WithBatch for TrainConfig {
    fn with_batch(mut self, b: usize) -> Self {
        for p in &mut self.phases {
            p.batch_size = b;
        }
        self
    }
}

/// Fills every visual-expert tensor with fresh random values.
pub fn scramble_visual_experts(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in model.params.ids_in_group(Group::VisualExperts) {
        let (r, c) = model.params.value(id).shape();
        *model.params.value_mut(id) = Tensor::uniform(r, c, 0.5, &mut rng);
    }
}

pub fn image_prompt(seed: u64, side: usize) -> Vec<PromptPart> {
    generate_sample(seed, SampleKind::ImageCaption, ImageDims::square(side).unwrap()).prompt(false)
}

pub fn video_prompt(seed: u64, side: usize) -> Vec<PromptPart> {
    generate_sample(seed, SampleKind::VideoCaption, ImageDims::square(side).unwrap()).prompt(true)
}

pub fn text_prompt(ids: &[usize]) -> Vec<PromptPart> {
    vec![PromptPart::Text(ids.to_vec())]
}

pub fn caption_text() -> Vec<usize> {
    vec![vocab::BOS, vocab::INSTR_DESCRIBE, vocab::INSTR_THE, vocab::COLOR + 1, vocab::SHAPE, vocab::CELL + 4, vocab::SEP, vocab::EOS]
}

/// Two visibly different frames: a dark one and a bright one with a bar.
pub fn two_frames(side: usize) -> (RasterImage, RasterImage) {
    let dims = ImageDims::square(side).unwrap();
    let a = RasterImage::filled(dims, [0.1, 0.2, 0.3]);
    let mut b = RasterImage::filled(dims, [0.9, 0.8, 0.1]);
    for y in 0..side / 3 {
        for x in 0..side {
            b.set_pixel(y, x, [0.0, 1.0, 0.0]);
        }
    }
    (a, b)
}

/// Validates `instance` against a schema shipped in `schemas/`.
pub fn assert_matches_schema(schema_file: &str, instance: &serde_json::Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(schema_file);
    let schema: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let compiled = jsonschema::JSONSchema::compile(&schema).expect("schema compiles");
    let msgs: Vec<String> = match compiled.validate(instance) {
        Ok(()) => return,
        Err(errors) => errors.map(|e| format!("{} at {}", e, e.instance_path)).collect(),
    };
    panic!("{schema_file}: {msgs:#?}\ninstance: {instance}");
}
