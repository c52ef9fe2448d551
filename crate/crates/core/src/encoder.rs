//! Toy vision transformer: one `tile × tile` view in, a `g × g` token grid out.
//!
//! patchify (non-overlapping `patch × patch`) → linear embed → add learned
//! row + column position embeddings → pre-norm transformer blocks → final
//! layer norm.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::RasterImage;
use crate::params::{Group, ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub tile_px: usize,
    pub patch_px: usize,
    pub d_v: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { tile_px: 336, patch_px: 14, d_v: 64, n_layers: 2, n_heads: 4, mlp_ratio: 4 }
    }
}

impl EncoderConfig {
    /// Grid side `tile / patch`.
    pub fn grid_side(&self) -> usize {
        self.tile_px / self.patch_px
    }

    pub fn tokens_per_view(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_px == 0 || self.tile_px % self.patch_px != 0 {
            return Err(Error::config("encoder.patch_px", "tile_px must be a multiple of patch_px"));
        }
        if self.n_heads == 0 || self.d_v % self.n_heads != 0 {
            return Err(Error::config("encoder.n_heads", "d_v must be divisible by n_heads"));
        }
        if self.n_layers == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("encoder.n_layers", "layers and mlp_ratio must be positive"));
        }
        Ok(())
    }
}

/// A `g_h × g_w` grid of feature rows, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    g_h: usize,
    g_w: usize,
    features: Tensor,
}

impl TokenGrid {
    pub fn new(g_h: usize, g_w: usize, features: Tensor) -> Self {
        assert_eq!(features.rows(), g_h * g_w, "feature rows must equal grid cells");
        Self { g_h, g_w, features }
    }

    pub fn g_h(&self) -> usize {
        self.g_h
    }

    pub fn g_w(&self) -> usize {
        self.g_w
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.g_h * self.g_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn into_features(self) -> Tensor {
        self.features
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    out: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    cfg: EncoderConfig,
    patch: (ParamId, ParamId),
    pos_row: ParamId,
    pos_col: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
}

/// Registers a `d_in × d_out` weight drawn from `U(-1/√d_in, 1/√d_in)` and a zero bias.
pub(crate) fn register_linear<R: Rng>(
    ps: &mut ParamSet,
    name: &str,
    group: Group,
    layer: Option<usize>,
    d_in: usize,
    d_out: usize,
    rng: &mut R,
) -> (ParamId, ParamId) {
    let bound = 1.0 / (d_in as f64).sqrt();
    let w = ps.register(format!("{name}.weight"), group, layer, Tensor::uniform(d_in, d_out, bound, rng));
    let b = ps.register(format!("{name}.bias"), group, layer, Tensor::zeros(1, d_out));
    (w, b)
}

pub(crate) fn register_norm(ps: &mut ParamSet, name: &str, group: Group, layer: Option<usize>, d: usize) -> (ParamId, ParamId) {
    let g = ps.register(format!("{name}.gamma"), group, layer, Tensor::filled(1, d, 1.0));
    let b = ps.register(format!("{name}.beta"), group, layer, Tensor::zeros(1, d));
    (g, b)
}

impl VisionEncoder {
    pub fn register<R: Rng>(cfg: EncoderConfig, ps: &mut ParamSet, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, g) = (cfg.d_v, cfg.grid_side());
        let patch_in = cfg.patch_px * cfg.patch_px * RasterImage::CHANNELS;
        let first = Some(0);
        let patch = register_linear(ps, "encoder.patch_embed", Group::Encoder, first, patch_in, d, rng);
        let pos_bound = 1.0 / (d as f64).sqrt();
        let pos_row = ps.register("encoder.pos_row", Group::Encoder, first, Tensor::uniform(g, d, pos_bound, rng));
        let pos_col = ps.register("encoder.pos_col", Group::Encoder, first, Tensor::uniform(g, d, pos_bound, rng));
        let hidden = d * cfg.mlp_ratio;
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("encoder.block{l}");
                let layer = Some(l);
                let grp = Group::Encoder;
                Block {
                    ln1: register_norm(ps, &format!("{p}.ln1"), grp, layer, d),
                    q: register_linear(ps, &format!("{p}.attn.q"), grp, layer, d, d, rng),
                    k: register_linear(ps, &format!("{p}.attn.k"), grp, layer, d, d, rng),
                    v: register_linear(ps, &format!("{p}.attn.v"), grp, layer, d, d, rng),
                    out: register_linear(ps, &format!("{p}.attn.out"), grp, layer, d, d, rng),
                    ln2: register_norm(ps, &format!("{p}.ln2"), grp, layer, d),
                    fc1: register_linear(ps, &format!("{p}.mlp.fc1"), grp, layer, d, hidden, rng),
                    fc2: register_linear(ps, &format!("{p}.mlp.fc2"), grp, layer, hidden, d, rng),
                }
            })
            .collect();
        let ln_f = register_norm(ps, "encoder.ln_f", Group::Encoder, Some(cfg.n_layers - 1), d);
        Ok(Self { cfg, patch, pos_row, pos_col, blocks, ln_f })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn patch_embed_ids(&self) -> (ParamId, ParamId) {
        self.patch
    }

    pub fn position_ids(&self) -> (ParamId, ParamId) {
        (self.pos_row, self.pos_col)
    }

    fn check_view(&self, view: &RasterImage) -> Result<()> {
        let t = self.cfg.tile_px;
        if view.dims().h_px != t || view.dims().w_px != t {
            return Err(Error::contract(format!(
                "encoder expects a {t}x{t} view, got {}x{}",
                view.dims().h_px,
                view.dims().w_px
            )));
        }
        Ok(())
    }

    /// Flattens each `patch × patch × 3` block into a row, ordered `(dy, dx, channel)`.
    pub fn patchify(&self, view: &RasterImage) -> Result<Tensor> {
        self.check_view(view)?;
        let (p, g) = (self.cfg.patch_px, self.cfg.grid_side());
        let width = p * p * 3;
        let mut out = Tensor::zeros(g * g, width);
        for gy in 0..g {
            for gx in 0..g {
                let row = out.row_mut(gy * g + gx);
                for dy in 0..p {
                    for dx in 0..p {
                        let px = view.pixel(gy * p + dy, gx * p + dx);
                        row[(dy * p + dx) * 3..(dy * p + dx) * 3 + 3].copy_from_slice(&px);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Linear patch embeddings, before position embeddings are added.
    pub fn patch_embeddings(&self, params: &ParamSet, view: &RasterImage) -> Result<Tensor> {
        let mut g = Graph::inference(params);
        let x = g.constant(self.patchify(view)?);
        let e = g.linear(x, self.patch.0, self.patch.1);
        Ok(g.value(e).clone())
    }

    /// Records the encoder forward pass for one view; the result is `g² × d_v`.
    pub fn encode_var(&self, g: &mut Graph, view: &RasterImage) -> Result<Var> {
        let side = self.cfg.grid_side();
        let heads = self.cfg.n_heads;
        let patches = g.constant(self.patchify(view)?);
        let x = g.linear(patches, self.patch.0, self.patch.1);
        let rows: Vec<usize> = (0..side * side).map(|i| i / side).collect();
        let cols: Vec<usize> = (0..side * side).map(|i| i % side).collect();
        let pr = g.embedding(self.pos_row, &rows);
        let pc = g.embedding(self.pos_col, &cols);
        let pos = g.add(pr, pc);
        let mut h = g.add(x, pos);
        for b in &self.blocks {
            let n = g.layer_norm(h, b.ln1.0, b.ln1.1);
            let q = g.linear(n, b.q.0, b.q.1);
            let k = g.linear(n, b.k.0, b.k.1);
            let v = g.linear(n, b.v.0, b.v.1);
            let a = g.attention(q, k, v, heads, false);
            let o = g.linear(a, b.out.0, b.out.1);
            h = g.add(h, o);
            let n = g.layer_norm(h, b.ln2.0, b.ln2.1);
            let f = g.linear(n, b.fc1.0, b.fc1.1);
            let f = g.gelu(f);
            let f = g.linear(f, b.fc2.0, b.fc2.1);
            h = g.add(h, f);
        }
        Ok(g.layer_norm(h, self.ln_f.0, self.ln_f.1))
    }

    pub fn encode_view(&self, params: &ParamSet, view: &RasterImage) -> Result<TokenGrid> {
        let mut g = Graph::inference(params);
        let out = self.encode_var(&mut g, view)?;
        let side = self.cfg.grid_side();
        Ok(TokenGrid::new(side, side, g.value(out).clone()))
    }

    pub fn encode_views(&self, params: &ParamSet, views: &[RasterImage]) -> Result<Vec<TokenGrid>> {
        views.iter().map(|v| self.encode_view(params, v)).collect()
    }
}
