//! Deterministic multi-epoch batching.
//!
//! Every epoch draws a fresh Fisher–Yates permutation from a stream seed
//! derived as `derive_seed(shuffle_seed, epoch)`, so the iterator's position
//! is a pure function of (seed, batches consumed). Resuming at batch `n` is
//! O(1): regenerate the containing epoch's permutation and skip within it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tensor::Array;

use super::{derive_seed, ParallelCorpus};

/// The permutation of record indices used by `epoch`.
pub fn epoch_permutation(count: usize, shuffle_seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(shuffle_seed, epoch));
    let mut perm: Vec<usize> = (0..count).collect();
    for i in (1..count).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// One batch of aligned records.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub source: Vec<Array<f32>>,
    pub target: Vec<Array<f32>>,
}

/// Endless batch sequence over a corpus; epochs tile one after another and
/// the last batch of an epoch may be short.
pub struct BatchIter<'a> {
    corpus: &'a ParallelCorpus,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
    offset: usize,
    consumed: u64,
    perm: Vec<usize>,
}

impl<'a> BatchIter<'a> {
    /// Batches needed to cover one epoch.
    pub fn batches_per_epoch(&self) -> usize {
        self.corpus.count().div_ceil(self.batch_size)
    }

    /// Batches yielded so far (or skipped by construction).
    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

/// Start batching from the beginning.
pub fn batch_iter<'a>(
    corpus: &'a ParallelCorpus,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<BatchIter<'a>> {
    batch_iter_at(corpus, batch_size, shuffle_seed, 0)
}

/// Start batching as if `consumed` batches had already been yielded; the
/// next batch equals what a fresh iterator would produce after `consumed`
/// calls.
pub fn batch_iter_at<'a>(
    corpus: &'a ParallelCorpus,
    batch_size: usize,
    shuffle_seed: u64,
    consumed: u64,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if corpus.count() == 0 {
        return Err(Error::EmptyBatch);
    }
    let per_epoch = corpus.count().div_ceil(batch_size) as u64;
    let epoch = consumed / per_epoch;
    let offset = (consumed % per_epoch) as usize;
    Ok(BatchIter {
        corpus,
        batch_size,
        shuffle_seed,
        epoch,
        offset,
        consumed,
        perm: epoch_permutation(corpus.count(), shuffle_seed, epoch),
    })
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.offset == self.batches_per_epoch() {
            self.epoch += 1;
            self.offset = 0;
            self.perm = epoch_permutation(self.corpus.count(), self.shuffle_seed, self.epoch);
        }
        let start = self.offset * self.batch_size;
        let end = (start + self.batch_size).min(self.corpus.count());
        let indices: Vec<usize> = self.perm[start..end].to_vec();
        let source = indices.iter().map(|&i| self.corpus.source.record(i)).collect();
        let target = indices.iter().map(|&i| self.corpus.target.record(i)).collect();
        self.offset += 1;
        self.consumed += 1;
        Some(Batch { indices, source, target })
    }
}
