//! GlueNet encoder/decoder: head (conversion) -> body (residual modules) ->
//! tail (one residual block, layer norms optional).

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, ParameterStore, Tape, ValueId};

use super::config::GlueNetConfig;
use super::mixer::{block_param_count, init_block, mixer_block, BlockDims};

/// Translator encoder M: maps `token_in x dim_in` sequences into the
/// consumer's `token_out x dim_out` space.
#[derive(Clone, Debug)]
pub struct GlueNetEncoder<E: Element> {
    pub config: GlueNetConfig,
    pub params: ParameterStore<E>,
}

/// Translator decoder N: the mirrored network mapping translated sequences
/// back to the source space. `config` is already the mirrored configuration.
#[derive(Clone, Debug)]
pub struct GlueNetDecoder<E: Element> {
    pub config: GlueNetConfig,
    pub params: ParameterStore<E>,
}

/// Dimensions of the converting first head block.
fn head_dims(cfg: &GlueNetConfig) -> BlockDims {
    BlockDims {
        l_in: cfg.token_in,
        l_out: cfg.token_out,
        l_hidden: cfg.token_hidden(),
        c_in: cfg.dim_in,
        c_out: cfg.dim_out,
        c_hidden: cfg.dim_hidden(),
    }
}

/// Dimensions of every block past the first: square at the output extents.
pub(crate) fn square_dims(cfg: &GlueNetConfig) -> BlockDims {
    BlockDims {
        l_in: cfg.token_out,
        l_out: cfg.token_out,
        l_hidden: cfg.token_hidden(),
        c_in: cfg.dim_out,
        c_out: cfg.dim_out,
        c_hidden: cfg.dim_hidden(),
    }
}

fn init_net<E: Element>(cfg: &GlueNetConfig, seed: u64) -> Result<ParameterStore<E>> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    init_block(&mut rng, &mut store, "head.h1", head_dims(cfg), false, true)?;
    for i in 2..=cfg.head_repeats {
        init_block(&mut rng, &mut store, &format!("head.h{i}"), square_dims(cfg), false, true)?;
    }
    for i in 1..=cfg.num_rms {
        init_block(&mut rng, &mut store, &format!("body.rm{i}"), square_dims(cfg), true, true)?;
    }
    init_block(&mut rng, &mut store, "tail", square_dims(cfg), true, cfg.tail_layer_norm)?;
    Ok(store)
}

/// Build a seeded encoder. Two builds from the same seed are bit-identical.
pub fn build_encoder<E: Element>(cfg: &GlueNetConfig, seed: u64) -> Result<GlueNetEncoder<E>> {
    Ok(GlueNetEncoder { config: cfg.clone(), params: init_net(cfg, seed)? })
}

/// Build a seeded decoder for the given *encoder* configuration; the decoder
/// itself uses the mirrored config.
pub fn build_decoder<E: Element>(cfg: &GlueNetConfig, seed: u64) -> Result<GlueNetDecoder<E>> {
    let mirrored = cfg.mirrored();
    Ok(GlueNetDecoder { config: mirrored.clone(), params: init_net(&mirrored, seed)? })
}

fn forward_net<E: Element>(
    tape: &mut Tape<E>,
    cfg: &GlueNetConfig,
    params: &ParameterStore<E>,
    x: ValueId,
) -> Result<ValueId> {
    let shape = tape.value(x).shape();
    if shape.dims() != [cfg.token_in, cfg.dim_in] {
        return Err(Error::ShapeMismatch {
            op: "forward",
            detail: format!(
                "input {} does not match configured {}x{}",
                shape, cfg.token_in, cfg.dim_in
            ),
        });
    }
    let mut h = x;
    // Head: non-residual conversion blocks (conversion in the first).
    for i in 1..=cfg.head_repeats {
        h = mixer_block(tape, params, &format!("head.h{i}"), h, false, true)?;
    }
    // Body: residual modules at the output extents.
    for i in 1..=cfg.num_rms {
        h = mixer_block(tape, params, &format!("body.rm{i}"), h, true, true)?;
    }
    // Tail: one residual block; layer norms only when configured.
    mixer_block(tape, params, "tail", h, true, cfg.tail_layer_norm)
}

/// Encode a `token_in x dim_in` value to `token_out x dim_out`.
pub fn forward_encoder<E: Element>(
    tape: &mut Tape<E>,
    enc: &GlueNetEncoder<E>,
    x: ValueId,
) -> Result<ValueId> {
    forward_net(tape, &enc.config, &enc.params, x)
}

/// Decode a translated value back to the source extents.
pub fn forward_decoder<E: Element>(
    tape: &mut Tape<E>,
    dec: &GlueNetDecoder<E>,
    x: ValueId,
) -> Result<ValueId> {
    forward_net(tape, &dec.config, &dec.params, x)
}

/// Closed-form count of every weight, bias, gamma, and beta in an encoder
/// built from `cfg`. Matches the enumerated store size exactly.
pub fn param_count(cfg: &GlueNetConfig) -> u64 {
    let square = square_dims(cfg);
    block_param_count(head_dims(cfg), false, true)
        + (cfg.head_repeats as u64 - 1) * block_param_count(square, false, true)
        + cfg.num_rms as u64 * block_param_count(square, true, true)
        + block_param_count(square, true, cfg.tail_layer_norm)
}
