//! A desk-scale vision-language model built from scratch.
//!
//! The pipeline splits an image into a global view plus high-resolution
//! local tiles ([`glhr`]), encodes each view with a small vision transformer
//! ([`encoder`]), mean-pools the token grids ([`merger`]), projects them into
//! the decoder's embedding space and runs a decoder whose attention layers
//! route visual tokens through dedicated expert QKV projections ([`vlm`]).
//! Position ids can be shared across all tokens of one frame ([`fpid`]).
//!
//! Training ([`pipeline`]) runs three phases with per-group freezing and
//! layer-wise learning-rate decay on the encoder; [`gradcheck`] compares
//! analytic gradients against central finite differences.

pub mod autograd;
pub mod budget;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod driver;
pub mod encoder;
pub mod error;
pub mod fpid;
pub mod glhr;
pub mod gradcheck;
pub mod image;
pub mod merger;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod vlm;

pub use error::{Error, Result};
