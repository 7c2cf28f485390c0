//! Translator networks and the adversarial discriminator.
//!
//! The translator is an MLP-mixer stack: a converting head, a body of
//! residual modules, and a single residual tail block. [`GlueNetConfig`]
//! carries the extents and width ratios; builders seed every parameter
//! deterministically, and forward functions write onto a caller-supplied
//! tape so the same code path serves training and inference.

mod config;
mod discriminator;
mod gluenet;
pub(crate) mod mixer;

pub use config::{
    GlueNetConfig, DEFAULT_DIM_HIDDEN_RATIO, DEFAULT_TOKEN_HIDDEN_RATIO, LAYER_NORM_EPS,
};
pub use discriminator::{
    build_discriminator, discriminator_param_count, forward_discriminator, Discriminator,
};
pub use gluenet::{
    build_decoder, build_encoder, forward_decoder, forward_encoder, param_count, GlueNetDecoder,
    GlueNetEncoder,
};
pub use mixer::mixer_block;
