//! Embedding stores, parallel-corpus pairing, deterministic batching, and
//! synthetic encoder-pair generation.
//!
//! A store is an immutable block of `count` records, each a `tokens x dim`
//! matrix of 32-bit floats, optionally tagged with unique 64-bit ids. Two
//! stores of equal count form a parallel corpus; pairing is positional
//! unless both sides carry ids, in which case records join by id.

mod batch;
mod gge;
mod synth;

use std::collections::HashSet;
use std::path::Path;

pub use batch::{batch_iter, batch_iter_at, epoch_permutation, Batch, BatchIter};
pub use gge::{read_gge, write_gge};
pub use synth::{gen_synthetic_pair, SyntheticEncoderSpec, SyntheticTransform, TransformKind};

use crate::error::{Error, Result};
use crate::tensor::{Array, Shape};

/// Derive an independent 64-bit seed from a base seed and a stream index
/// (splitmix64). Equal inputs give equal outputs on every platform.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A block of `count` embedding records, each `tokens x dim`, stored
/// record-major with token rows contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    tokens: usize,
    dim: usize,
    data: Vec<f32>,
    ids: Option<Vec<u64>>,
}

impl EmbeddingStore {
    /// Wrap raw record data. The data length must be a whole number of
    /// `tokens x dim` records and ids, when present, must be unique and one
    /// per record.
    pub fn new(
        tokens: usize,
        dim: usize,
        data: Vec<f32>,
        ids: Option<Vec<u64>>,
    ) -> Result<Self> {
        if tokens == 0 || dim == 0 {
            return Err(Error::InvalidShape(format!(
                "store extents must be positive, got {tokens}x{dim}"
            )));
        }
        let record = tokens * dim;
        if data.len() % record != 0 {
            return Err(Error::InvalidShape(format!(
                "{} floats do not divide into {tokens}x{dim} records",
                data.len()
            )));
        }
        let count = data.len() / record;
        if let Some(ids) = &ids {
            if ids.len() != count {
                return Err(Error::InvalidShape(format!(
                    "{} ids for {count} records",
                    ids.len()
                )));
            }
            let unique: HashSet<u64> = ids.iter().copied().collect();
            if unique.len() != ids.len() {
                return Err(Error::Format {
                    what: "ids",
                    detail: "record ids must be unique".into(),
                });
            }
        }
        Ok(EmbeddingStore { tokens, dim, data, ids })
    }

    /// Build a store from per-record matrices, all of one shape.
    pub fn from_records(records: &[Array<f32>], ids: Option<Vec<u64>>) -> Result<Self> {
        let first = records.first().ok_or(Error::EmptyBatch)?;
        let (tokens, dim) = first.shape().rank2()?;
        let mut data = Vec::with_capacity(records.len() * tokens * dim);
        for rec in records {
            if rec.shape() != first.shape() {
                return Err(Error::ShapeMismatch {
                    op: "from_records",
                    detail: format!("{} in a {} store", rec.shape(), first.shape()),
                });
            }
            data.extend_from_slice(rec.as_slice());
        }
        EmbeddingStore::new(tokens, dim, data, ids)
    }

    pub fn count(&self) -> usize {
        self.data.len() / (self.tokens * self.dim)
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> Option<&[u64]> {
        self.ids.as_deref()
    }

    /// Raw payload in file order.
    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    /// Record `i` as an owned `tokens x dim` matrix.
    pub fn record(&self, i: usize) -> Array<f32> {
        let record = self.tokens * self.dim;
        let slice = &self.data[i * record..(i + 1) * record];
        Array::from_vec(
            Shape::matrix(self.tokens, self.dim).expect("validated extents"),
            slice.to_vec(),
        )
        .expect("validated extents")
    }

    /// All records as owned matrices.
    pub fn records(&self) -> Vec<Array<f32>> {
        (0..self.count()).map(|i| self.record(i)).collect()
    }
}

/// Aligned source/target stores: record `i` of one corresponds to record
/// `i` of the other.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    pub source: EmbeddingStore,
    pub target: EmbeddingStore,
}

impl ParallelCorpus {
    pub fn count(&self) -> usize {
        self.source.count()
    }
}

/// Align two in-memory stores. When both carry ids the pairing is the id
/// join (sorted by id for determinism); otherwise it is positional and the
/// counts must match.
pub fn pair_stores(source: EmbeddingStore, target: EmbeddingStore) -> Result<ParallelCorpus> {
    match (source.ids(), target.ids()) {
        (Some(sids), Some(tids)) => {
            let t_index: std::collections::HashMap<u64, usize> =
                tids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
            let mut joined: Vec<(u64, usize, usize)> = sids
                .iter()
                .enumerate()
                .filter_map(|(si, &id)| t_index.get(&id).map(|&ti| (id, si, ti)))
                .collect();
            if joined.is_empty() {
                return Err(Error::EmptyJoin);
            }
            joined.sort_by_key(|&(id, _, _)| id);
            let ids: Vec<u64> = joined.iter().map(|&(id, _, _)| id).collect();
            let src_records: Vec<Array<f32>> =
                joined.iter().map(|&(_, si, _)| source.record(si)).collect();
            let tgt_records: Vec<Array<f32>> =
                joined.iter().map(|&(_, _, ti)| target.record(ti)).collect();
            Ok(ParallelCorpus {
                source: EmbeddingStore::from_records(&src_records, Some(ids.clone()))?,
                target: EmbeddingStore::from_records(&tgt_records, Some(ids))?,
            })
        }
        _ => {
            if source.count() != target.count() {
                return Err(Error::CountMismatch {
                    src: source.count(),
                    tgt: target.count(),
                });
            }
            Ok(ParallelCorpus { source, target })
        }
    }
}

/// Read two embedding files and align them into a corpus.
pub fn pair(source_path: &Path, target_path: &Path) -> Result<ParallelCorpus> {
    let source = read_gge(source_path)?;
    let target = read_gge(target_path)?;
    pair_stores(source, target)
}
