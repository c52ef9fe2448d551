//! Projector and decoder language model with Visual Expert attention.
//!
//! Every decoder layer owns two sets of query/key/value projections: the
//! text set and the visual-expert set. Each token is projected by the set
//! matching its type, then all tokens attend jointly under one causal mask
//! with rotary phases taken from their assigned position ids. The attention
//! output projection and the feed-forward block are shared by both types.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{register_linear, register_norm};
use crate::error::{Error, Result};
use crate::fpid::{Segment, SequenceLayout, TokenType};
use crate::params::{Group, ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub d_m: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub rope_base: f64,
    pub ffn_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { d_m: 128, n_layers: 4, n_heads: 4, vocab: 512, rope_base: 10000.0, ffn_ratio: 4 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_m % self.n_heads != 0 {
            return Err(Error::config("decoder.n_heads", "d_m must be divisible by n_heads"));
        }
        if (self.d_m / self.n_heads) % 2 != 0 {
            return Err(Error::config("decoder.n_heads", "head dimension must be even for rotary encoding"));
        }
        if self.n_layers == 0 || self.vocab == 0 || self.ffn_ratio == 0 {
            return Err(Error::config("decoder.n_layers", "layers, vocab and ffn_ratio must be positive"));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return Err(Error::config("decoder.rope_base", "must be finite and greater than 1"));
        }
        Ok(())
    }
}

/// Affine map from encoder feature space to the decoder embedding space.
#[derive(Clone, Debug)]
pub struct Projector {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Projector {
    pub fn register<R: Rng>(d_v: usize, d_m: usize, ps: &mut ParamSet, rng: &mut R) -> Self {
        let (weight, bias) = register_linear(ps, "projector", Group::Projector, None, d_v, d_m, rng);
        Self { weight, bias }
    }

    pub fn project_var(&self, g: &mut Graph, features: Var) -> Var {
        g.linear(features, self.weight, self.bias)
    }

    /// Projects each row of `features` (`n × d_v`) to `n × d_m`.
    pub fn project(&self, params: &ParamSet, features: &Tensor) -> Result<Tensor> {
        let d_v = params.value(self.weight).rows();
        if features.cols() != d_v {
            return Err(Error::contract(format!("projector expects width {d_v}, got {}", features.cols())));
        }
        if !features.is_finite() {
            return Err(Error::contract("projector input has non-finite entries"));
        }
        let mut g = Graph::inference(params);
        let x = g.constant(features.clone());
        let y = self.project_var(&mut g, x);
        Ok(g.value(y).clone())
    }
}

/// Query/key/value projections `(weight, bias)`.
#[derive(Clone, Copy, Debug)]
pub struct Qkv {
    pub q: (ParamId, ParamId),
    pub k: (ParamId, ParamId),
    pub v: (ParamId, ParamId),
}

impl Qkv {
    pub fn ids(&self) -> [ParamId; 6] {
        [self.q.0, self.q.1, self.k.0, self.k.1, self.v.0, self.v.1]
    }
}

#[derive(Clone, Debug)]
pub struct ExpertLayer {
    pub ln1: (ParamId, ParamId),
    pub text_qkv: Qkv,
    pub visual_qkv: Qkv,
    pub attn_out: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub ffn_in: (ParamId, ParamId),
    pub ffn_out: (ParamId, ParamId),
}

/// How a layer picks QKV projections per token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    /// Visual tokens use the expert projections.
    VisualExperts,
    /// Every token uses the text projections (the expert-free baseline).
    TextOnly,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: DecoderConfig,
    pub tok_embed: ParamId,
    pub layers: Vec<ExpertLayer>,
    pub ln_f: (ParamId, ParamId),
    pub lm_head: (ParamId, ParamId),
}

/// One piece of an assembled sequence.
#[derive(Clone, Debug)]
pub enum SeqPart {
    Text(Vec<usize>),
    /// Projected visual tokens of one view or frame (`n × d_m`).
    Visual(Var),
}

/// Output of [`Decoder::assemble_sequence`].
#[derive(Clone, Debug)]
pub struct Assembled {
    pub embeddings: Var,
    pub layout: SequenceLayout,
    /// Token id at each text position, `None` at visual positions.
    pub token_ids: Vec<Option<usize>>,
}

impl Decoder {
    pub fn register<R: Rng>(cfg: DecoderConfig, ps: &mut ParamSet, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_m;
        let tok_embed = ps.register("decoder.tok_embed", Group::Embeddings, None, Tensor::uniform(cfg.vocab, d, 1.0, rng));
        let core = Group::DecoderCore;
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("decoder.layer{l}");
                let text_qkv = Qkv {
                    q: register_linear(ps, &format!("{p}.text_q"), core, None, d, d, rng),
                    k: register_linear(ps, &format!("{p}.text_k"), core, None, d, d, rng),
                    v: register_linear(ps, &format!("{p}.text_v"), core, None, d, d, rng),
                };
                let visual_qkv = Qkv {
                    q: copy_linear(ps, text_qkv.q, &format!("{p}.visual_q")),
                    k: copy_linear(ps, text_qkv.k, &format!("{p}.visual_k")),
                    v: copy_linear(ps, text_qkv.v, &format!("{p}.visual_v")),
                };
                ExpertLayer {
                    ln1: register_norm(ps, &format!("{p}.ln1"), core, None, d),
                    text_qkv,
                    visual_qkv,
                    attn_out: register_linear(ps, &format!("{p}.attn_out"), core, None, d, d, rng),
                    ln2: register_norm(ps, &format!("{p}.ln2"), core, None, d),
                    ffn_in: register_linear(ps, &format!("{p}.ffn_in"), core, None, d, d * cfg.ffn_ratio, rng),
                    ffn_out: register_linear(ps, &format!("{p}.ffn_out"), core, None, d * cfg.ffn_ratio, d, rng),
                }
            })
            .collect();
        let ln_f = register_norm(ps, "decoder.ln_f", core, None, d);
        let lm_head = register_linear(ps, "decoder.lm_head", core, None, d, cfg.vocab, rng);
        Ok(Self { cfg, tok_embed, layers, ln_f, lm_head })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Overwrites every layer's visual-expert QKV with a copy of its text QKV.
    pub fn copy_text_qkv_into_experts(&self, ps: &mut ParamSet) {
        for layer in &self.layers {
            for (src, dst) in layer.text_qkv.ids().into_iter().zip(layer.visual_qkv.ids()) {
                let v = ps.value(src).clone();
                *ps.value_mut(dst) = v;
            }
        }
    }

    /// Concatenates text embeddings and projected visual tokens in order and
    /// builds the matching layout (positions not yet assigned).
    pub fn assemble_sequence(&self, g: &mut Graph, parts: &[SeqPart]) -> Result<Assembled> {
        let mut segments = Vec::new();
        let mut token_ids = Vec::new();
        let mut text_ids = Vec::new();
        let mut text_rows = Vec::new();
        let mut visual = Vec::new();
        let mut pos = 0;
        for part in parts {
            match part {
                SeqPart::Text(ids) => {
                    if let Some(&bad) = ids.iter().find(|&&t| t >= self.cfg.vocab) {
                        return Err(Error::contract(format!("token id {bad} outside vocab {}", self.cfg.vocab)));
                    }
                    segments.push(Segment::Text(ids.len()));
                    text_ids.extend_from_slice(ids);
                    text_rows.extend(pos..pos + ids.len());
                    token_ids.extend(ids.iter().map(|&t| Some(t)));
                    pos += ids.len();
                }
                SeqPart::Visual(v) => {
                    let (n, d) = g.value(*v).shape();
                    if d != self.cfg.d_m {
                        return Err(Error::contract(format!("visual tokens have width {d}, decoder expects {}", self.cfg.d_m)));
                    }
                    segments.push(Segment::VisualFrame(n));
                    visual.push((*v, (pos..pos + n).collect::<Vec<_>>()));
                    token_ids.extend(std::iter::repeat(None).take(n));
                    pos += n;
                }
            }
        }
        if pos == 0 {
            return Err(Error::contract("cannot assemble an empty sequence"));
        }
        let mut pieces = Vec::new();
        if !text_ids.is_empty() {
            let e = g.embedding(self.tok_embed, &text_ids);
            pieces.push((e, text_rows));
        }
        pieces.extend(visual.into_iter().filter(|(_, rows)| !rows.is_empty()));
        let embeddings = g.scatter_rows(pos, pieces);
        Ok(Assembled { embeddings, layout: SequenceLayout::new(segments), token_ids })
    }

    /// One decoder block: routed QKV, rotary phases from the layout's
    /// position ids, joint causal attention, shared output projection and FFN.
    pub fn ve_attention_forward(
        &self,
        g: &mut Graph,
        hidden: Var,
        layout: &SequenceLayout,
        layer: &ExpertLayer,
        routing: Routing,
    ) -> Result<Var> {
        if !layout.has_positions() {
            return Err(Error::contract("layout has no position ids; run assign_positions first"));
        }
        let n = g.value(hidden).rows();
        if n != layout.len() {
            return Err(Error::contract(format!("hidden has {n} rows but layout has {} tokens", layout.len())));
        }
        let heads = self.cfg.n_heads;
        let normed = g.layer_norm(hidden, layer.ln1.0, layer.ln1.1);
        let (q, k, v) = match routing {
            Routing::TextOnly => project_qkv(g, normed, &layer.text_qkv),
            Routing::VisualExperts => {
                let text = layout.indices_of(TokenType::Text);
                let vis = layout.indices_of(TokenType::Visual);
                if vis.is_empty() {
                    project_qkv(g, normed, &layer.text_qkv)
                } else if text.is_empty() {
                    project_qkv(g, normed, &layer.visual_qkv)
                } else {
                    let xt = g.gather_rows(normed, &text);
                    let xv = g.gather_rows(normed, &vis);
                    let (qt, kt, vt) = project_qkv(g, xt, &layer.text_qkv);
                    let (qv, kv, vv) = project_qkv(g, xv, &layer.visual_qkv);
                    let q = g.scatter_rows(n, vec![(qt, text.clone()), (qv, vis.clone())]);
                    let k = g.scatter_rows(n, vec![(kt, text.clone()), (kv, vis.clone())]);
                    let v = g.scatter_rows(n, vec![(vt, text), (vv, vis)]);
                    (q, k, v)
                }
            }
        };
        let pos = layout.position_ids();
        let q = g.rope(q, pos, heads, self.cfg.rope_base);
        let k = g.rope(k, pos, heads, self.cfg.rope_base);
        let a = g.attention(q, k, v, heads, true);
        let o = g.linear(a, layer.attn_out.0, layer.attn_out.1);
        let h = g.add(hidden, o);
        let m = g.layer_norm(h, layer.ln2.0, layer.ln2.1);
        let f = g.linear(m, layer.ffn_in.0, layer.ffn_in.1);
        let f = g.gelu(f);
        let f = g.linear(f, layer.ffn_out.0, layer.ffn_out.1);
        Ok(g.add(h, f))
    }

    /// All layers, final norm and vocabulary projection: `n × vocab` logits.
    pub fn forward(&self, g: &mut Graph, embeddings: Var, layout: &SequenceLayout, routing: Routing) -> Result<Var> {
        let mut h = embeddings;
        for layer in &self.layers {
            h = self.ve_attention_forward(g, h, layout, layer, routing)?;
        }
        let h = g.layer_norm(h, self.ln_f.0, self.ln_f.1);
        Ok(g.linear(h, self.lm_head.0, self.lm_head.1))
    }
}

fn project_qkv(g: &mut Graph, x: Var, w: &Qkv) -> (Var, Var, Var) {
    (g.linear(x, w.q.0, w.q.1), g.linear(x, w.k.0, w.k.1), g.linear(x, w.v.0, w.v.1))
}

fn copy_linear(ps: &mut ParamSet, src: (ParamId, ParamId), name: &str) -> (ParamId, ParamId) {
    let w = ps.value(src.0).clone();
    let b = ps.value(src.1).clone();
    (
        ps.register(format!("{name}.weight"), Group::VisualExperts, None, w),
        ps.register(format!("{name}.bias"), Group::VisualExperts, None, b),
    )
}

/// Next-token targets on text→text transitions; every other position is masked.
pub fn text_targets(token_ids: &[Option<usize>]) -> Vec<Option<usize>> {
    let mut t = vec![None; token_ids.len()];
    for i in 0..token_ids.len().saturating_sub(1) {
        if let (Some(_), Some(next)) = (token_ids[i], token_ids[i + 1]) {
            t[i] = Some(next);
        }
    }
    t
}
