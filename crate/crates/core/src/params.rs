//! Named parameter storage shared by the encoder, projector and decoder.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Trainable parameter groups toggled per training phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Encoder,
    Projector,
    Embeddings,
    DecoderCore,
    VisualExperts,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Encoder,
        Group::Projector,
        Group::Embeddings,
        Group::DecoderCore,
        Group::VisualExperts,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Projector => "projector",
            Group::Embeddings => "embeddings",
            Group::DecoderCore => "decoder_core",
            Group::VisualExperts => "visual_experts",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    /// Encoder block index, used for layer-wise learning-rate decay.
    pub encoder_layer: Option<usize>,
    pub value: Tensor,
}

/// Ordered collection of named tensors. Registration order is the
/// checkpoint order and the optimizer's update order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        group: Group,
        encoder_layer: Option<usize>,
        value: Tensor,
    ) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, group, encoder_layer, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in_group(&self, group: Group) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// True when every tensor in `group` is bitwise equal between `self` and `other`.
    pub fn group_bitwise_eq(&self, other: &ParamSet, group: Group) -> bool {
        self.params
            .iter()
            .zip(&other.params)
            .filter(|(a, _)| a.group == group)
            .all(|(a, b)| {
                a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
