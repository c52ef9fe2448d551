//! The assembled vision-language model: split → encode → merge → project → decode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{EncoderConfig, VisionEncoder};
use crate::error::{Error, Result};
use crate::fpid::{assign_positions, PositionMode, SequenceLayout};
use crate::glhr::{apply_split, plan_split, DEFAULT_MAX_PATCHES};
use crate::image::{ImageDims, RasterImage};
use crate::merger::{merge_var, MergeSpec};
use crate::params::ParamSet;
use crate::vlm::{text_targets, Decoder, DecoderConfig, Projector, Routing, SeqPart};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub max_patches: usize,
    pub include_global: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            max_patches: DEFAULT_MAX_PATCHES,
            include_global: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.max_patches == 0 {
            return Err(Error::config("model.max_patches", "must be at least 1"));
        }
        Ok(())
    }
}

/// One piece of a prompt.
#[derive(Clone, Debug, PartialEq)]
pub enum PromptPart {
    Text(Vec<usize>),
    /// Split into a global view plus local tiles.
    Image(RasterImage),
    /// Each frame becomes one view, resized to the tile size.
    Video(Vec<RasterImage>),
}

pub struct Forward {
    pub logits: Var,
    pub layout: SequenceLayout,
    pub token_ids: Vec<Option<usize>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub encoder: VisionEncoder,
    pub projector: Projector,
    pub decoder: Decoder,
}

impl Model {
    /// Fresh model; parameter values depend only on `config` and `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = VisionEncoder::register(config.encoder.clone(), &mut params, &mut rng)?;
        let projector = Projector::register(config.encoder.d_v, config.decoder.d_m, &mut params, &mut rng);
        let decoder = Decoder::register(config.decoder.clone(), &mut params, &mut rng)?;
        Ok(Self { config, params, encoder, projector, decoder })
    }

    /// Views fed to the encoder for one media part, in sequence order.
    pub fn views_for(&self, part: &PromptPart) -> Result<Vec<RasterImage>> {
        let tile = self.config.encoder.tile_px;
        match part {
            PromptPart::Text(_) => Ok(Vec::new()),
            PromptPart::Image(img) => {
                let plan = plan_split(img.dims(), tile, self.config.max_patches, self.config.include_global);
                apply_split(img, &plan)
            }
            PromptPart::Video(frames) => {
                if frames.is_empty() {
                    return Err(Error::contract("video has no frames"));
                }
                let dims = frames[0].dims();
                if frames.iter().any(|f| f.dims() != dims) {
                    return Err(Error::contract("video frames must share dimensions"));
                }
                let to = ImageDims { h_px: tile, w_px: tile };
                Ok(frames.iter().map(|f| f.resize_bilinear(to)).collect())
            }
        }
    }

    /// Encoded, merged and projected tokens for one view.
    pub fn visual_tokens(&self, g: &mut Graph, view: &RasterImage, merge: MergeSpec) -> Result<Var> {
        let side = self.config.encoder.grid_side();
        let grid = self.encoder.encode_var(g, view)?;
        let merged = merge_var(g, grid, side, side, merge);
        Ok(self.projector.project_var(g, merged))
    }

    pub fn forward_with(
        &self,
        g: &mut Graph,
        prompt: &[PromptPart],
        merge: MergeSpec,
        mode: PositionMode,
        routing: Routing,
    ) -> Result<Forward> {
        let mut parts = Vec::new();
        for p in prompt {
            match p {
                PromptPart::Text(ids) => parts.push(SeqPart::Text(ids.clone())),
                media => {
                    for view in self.views_for(media)? {
                        parts.push(SeqPart::Visual(self.visual_tokens(g, &view, merge)?));
                    }
                }
            }
        }
        let assembled = self.decoder.assemble_sequence(g, &parts)?;
        let layout = assign_positions(assembled.layout, mode);
        let logits = self.decoder.forward(g, assembled.embeddings, &layout, routing)?;
        Ok(Forward { logits, layout, token_ids: assembled.token_ids })
    }

    pub fn forward(&self, g: &mut Graph, prompt: &[PromptPart], merge: MergeSpec, mode: PositionMode) -> Result<Forward> {
        self.forward_with(g, prompt, merge, mode, Routing::VisualExperts)
    }

    /// Mean next-token cross-entropy over text→text transitions.
    pub fn loss(&self, g: &mut Graph, prompt: &[PromptPart], merge: MergeSpec, mode: PositionMode) -> Result<(Var, Forward)> {
        let fwd = self.forward(g, prompt, merge, mode)?;
        let targets = text_targets(&fwd.token_ids);
        if targets.iter().all(Option::is_none) {
            return Err(Error::contract("prompt has no adjacent text tokens to supervise"));
        }
        let loss = g.cross_entropy(fwd.logits, &targets);
        Ok((loss, fwd))
    }

    /// Scalar loss without recording gradients.
    pub fn loss_value(&self, params: &ParamSet, prompt: &[PromptPart], merge: MergeSpec, mode: PositionMode) -> Result<f64> {
        let mut g = Graph::inference(params);
        let (loss, _) = self.loss(&mut g, prompt, merge, mode)?;
        Ok(g.value(loss).get(0, 0))
    }

    /// Logits as a plain tensor, `tokens × vocab`.
    pub fn logits(&self, prompt: &[PromptPart], merge: MergeSpec, mode: PositionMode) -> Result<crate::tensor::Tensor> {
        let mut g = Graph::inference(&self.params);
        let fwd = self.forward(&mut g, prompt, merge, mode)?;
        Ok(g.value(fwd.logits).clone())
    }
}
