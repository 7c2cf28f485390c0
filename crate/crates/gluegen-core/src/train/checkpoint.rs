//! The GGCK checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "GGCK" | version u32 | config digest (32 bytes, SHA-256 of the
//! gluenet config text) | config text (u64 length + bytes, a [gluenet]
//! section followed by a [train] section) | three parameter sections
//! (encoder, decoder, discriminator) | two optimizer sections (generator,
//! discriminator) | trailing RNG state (shuffle seed u64, batches consumed
//! u64)
//! ```
//!
//! A parameter section is a u32 block count followed by named tensor blocks:
//! u32 name length, name bytes, u32 rank, u32 dims, then 32-bit floats. An
//! optimizer section carries its step counter as a u64, then the same block
//! form for the rank-1 moment buffers under `m.` / `v.` name prefixes.
//! Decoding is strict: every length must match and no bytes may remain.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::GlueNetConfig;
use crate::tensor::{Array, ParameterStore, Shape, Tensor};

use super::adamw::AdamWState;
use super::trainer::Trainer;
use super::TrainConfig;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A fully decoded checkpoint, ready for [`Trainer::resume`].
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub gcfg: GlueNetConfig,
    pub tcfg: TrainConfig,
    pub step: u64,
    pub shuffle_seed: u64,
    pub encoder_params: ParameterStore<f32>,
    pub decoder_params: ParameterStore<f32>,
    pub disc_params: ParameterStore<f32>,
    pub gen_opt: AdamWState,
    pub disc_opt: AdamWState,
}

/// Write the trainer's full state to `path`.
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(trainer)).map_err(|e| Error::io(path, e))
}

/// Read and strictly decode a checkpoint. When `requested` is given, its
/// architecture digest must match the stored one.
pub fn load_checkpoint(path: &Path, requested: Option<&GlueNetConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, requested)
}

pub(crate) fn encode_checkpoint(t: &Trainer) -> Vec<u8> {
    let gluenet_text = t.gcfg.to_text();
    let config_text = format!("[gluenet]\n{gluenet_text}[train]\n{}", t.tcfg.to_text());
    let digest = Sha256::digest(gluenet_text.as_bytes());

    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&digest);
    out.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    write_store(&mut out, &t.encoder.params);
    write_store(&mut out, &t.decoder.params);
    write_store(&mut out, &t.discriminator.params);
    write_optimizer(&mut out, &t.gen_opt);
    write_optimizer(&mut out, &t.disc_opt);
    out.extend_from_slice(&t.shuffle_seed.to_le_bytes());
    out.extend_from_slice(&t.step.to_le_bytes());
    out
}

pub(crate) fn decode_checkpoint(
    bytes: &[u8],
    requested: Option<&GlueNetConfig>,
) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(fmt_err("bad magic, expected \"GGCK\""));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut digest = [0u8; 32];
    digest.copy_from_slice(r.take(32)?);

    let text_len = r.u64()? as usize;
    let text = std::str::from_utf8(r.take(text_len)?)
        .map_err(|_| fmt_err("config text is not valid UTF-8"))?;
    let (gluenet_text, train_text) = split_sections(text)?;
    if Sha256::digest(gluenet_text.as_bytes())[..] != digest {
        return Err(fmt_err("config digest does not match the stored gluenet section"));
    }
    if let Some(req) = requested {
        let want = Sha256::digest(req.to_text().as_bytes());
        if want[..] != digest {
            return Err(Error::DigestMismatch { stored: hex(&digest), requested: hex(&want) });
        }
    }
    let gcfg = GlueNetConfig::from_text(&gluenet_text)?;
    let tcfg = TrainConfig::from_text(&train_text)?;

    let encoder_params = read_store(&mut r)?;
    let decoder_params = read_store(&mut r)?;
    let disc_params = read_store(&mut r)?;
    let gen_opt = read_optimizer(&mut r)?;
    let disc_opt = read_optimizer(&mut r)?;
    let shuffle_seed = r.u64()?;
    let step = r.u64()?;
    r.finish()?;

    Ok(Checkpoint {
        gcfg,
        tcfg,
        step,
        shuffle_seed,
        encoder_params,
        decoder_params,
        disc_params,
        gen_opt,
        disc_opt,
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", detail: detail.into() }
}

/// Split the stored config text back into its two sections, each ending in a
/// trailing newline exactly as serialized.
fn split_sections(text: &str) -> Result<(String, String)> {
    let mut gluenet = String::new();
    let mut train = String::new();
    let mut section = 0u8;
    for line in text.lines() {
        match (line, section) {
            ("[gluenet]", 0) => section = 1,
            ("[train]", 1) => section = 2,
            (_, 1) => {
                gluenet.push_str(line);
                gluenet.push('\n');
            }
            (_, 2) => {
                train.push_str(line);
                train.push('\n');
            }
            _ => return Err(fmt_err("config text must hold a [gluenet] then a [train] section")),
        }
    }
    if section != 2 {
        return Err(fmt_err("config text must hold a [gluenet] then a [train] section"));
    }
    Ok((gluenet, train))
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_name(out: &mut Vec<u8>, name: &str) {
    push_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
}

fn push_block(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    push_name(out, name);
    push_u32(out, dims.len() as u32);
    for &d in dims {
        push_u32(out, d as u32);
    }
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn write_store(out: &mut Vec<u8>, store: &ParameterStore<f32>) {
    push_u32(out, store.len() as u32);
    for (name, tensor) in store.iter() {
        push_block(out, name, tensor.value().shape().dims(), tensor.value().as_slice());
    }
}

fn write_optimizer(out: &mut Vec<u8>, state: &AdamWState) {
    out.extend_from_slice(&state.t().to_le_bytes());
    let count = state.first_moments().count() + state.second_moments().count();
    push_u32(out, count as u32);
    for (key, buf) in state.first_moments() {
        push_block(out, &format!("m.{key}"), &[buf.len()], buf);
    }
    for (key, buf) in state.second_moments() {
        push_block(out, &format!("v.{key}"), &[buf.len()], buf);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| fmt_err("length overflow"))?;
        if end > self.bytes.len() {
            return Err(fmt_err(format!(
                "truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| fmt_err("block name is not valid UTF-8"))
    }

    fn floats(&mut self, numel: usize) -> Result<Vec<f32>> {
        let bytes = self.take(numel.checked_mul(4).ok_or_else(|| fmt_err("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(fmt_err(format!(
                "{} trailing bytes after the RNG state block",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn read_store(r: &mut Reader) -> Result<ParameterStore<f32>> {
    let count = r.u32()? as usize;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name = r.name()?;
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 2 {
            return Err(fmt_err(format!("tensor `{name}` has unsupported rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let shape = Shape::new(&dims)
            .map_err(|e| fmt_err(format!("tensor `{name}` has a bad shape: {e}")))?;
        let data = r.floats(shape.numel())?;
        let value = Array::from_vec(shape, data).expect("length matches the shape");
        store
            .insert(&name, Tensor::new(value, true))
            .map_err(|_| fmt_err(format!("duplicate tensor `{name}`")))?;
    }
    Ok(store)
}

fn read_optimizer(r: &mut Reader) -> Result<AdamWState> {
    let t = r.u64()?;
    let count = r.u32()? as usize;
    let mut m: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut v: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for _ in 0..count {
        let name = r.name()?;
        let rank = r.u32()?;
        if rank != 1 {
            return Err(fmt_err(format!("optimizer buffer `{name}` must be rank 1, got {rank}")));
        }
        let len = r.u32()? as usize;
        let data = r.floats(len)?;
        let (map, key) = if let Some(key) = name.strip_prefix("m.") {
            (&mut m, key)
        } else if let Some(key) = name.strip_prefix("v.") {
            (&mut v, key)
        } else {
            return Err(fmt_err(format!(
                "optimizer buffer `{name}` lacks the m./v. moment prefix"
            )));
        };
        if map.insert(key.to_string(), data).is_some() {
            return Err(fmt_err(format!("duplicate optimizer buffer `{name}`")));
        }
    }
    AdamWState::from_parts(m, v, t)
        .map_err(|_| fmt_err("optimizer moment buffers are inconsistent"))
}
