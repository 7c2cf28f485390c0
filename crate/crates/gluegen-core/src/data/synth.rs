//! Synthetic encoder pairs: standard-normal source records pushed through a
//! fixed seed-determined transform, plus optional Gaussian noise on the
//! target side. The transform is returned alongside the corpus so tests can
//! measure how close a trained translator gets to the generating map.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Array, Shape};

use super::{pair_stores, EmbeddingStore, ParallelCorpus};

/// Which fixed map turns a source record into the pre-noise target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformKind {
    /// Per-token rotation by one orthogonal `C x C` matrix; extents must
    /// match between source and target.
    OrthogonalRotation,
    /// Token permutation followed by the per-token rotation; extents must
    /// match.
    TokenPermutationRotation,
    /// Dense two-layer tanh network on the flattened record; extents may
    /// differ arbitrarily.
    RandomTwoLayerNet,
}

/// Recipe for one synthetic encoder pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticEncoderSpec {
    pub seed: u64,
    pub l_in: usize,
    pub c_in: usize,
    pub l_out: usize,
    pub c_out: usize,
    pub transform: TransformKind,
    pub noise_sigma: f64,
}

impl SyntheticEncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.l_in == 0 || self.c_in == 0 || self.l_out == 0 || self.c_out == 0 {
            return Err(Error::Config(format!(
                "synthetic extents must be positive, got {}x{} -> {}x{}",
                self.l_in, self.c_in, self.l_out, self.c_out
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "noise sigma must be finite and nonnegative, got {}",
                self.noise_sigma
            )));
        }
        match self.transform {
            TransformKind::OrthogonalRotation | TransformKind::TokenPermutationRotation => {
                if self.c_in != self.c_out || self.l_in != self.l_out {
                    return Err(Error::Config(format!(
                        "{:?} requires matching extents, got {}x{} -> {}x{}",
                        self.transform, self.l_in, self.c_in, self.l_out, self.c_out
                    )));
                }
                Ok(())
            }
            TransformKind::RandomTwoLayerNet => Ok(()),
        }
    }
}

/// The concrete generating map, exactly as used during generation.
#[derive(Clone, Debug, PartialEq)]
pub enum SyntheticTransform {
    Orthogonal {
        q: Array<f64>,
    },
    PermutedOrthogonal {
        perm: Vec<usize>,
        q: Array<f64>,
    },
    TwoLayerNet {
        w1: Array<f64>,
        b1: Array<f64>,
        w2: Array<f64>,
        b2: Array<f64>,
        l_out: usize,
        c_out: usize,
    },
}

impl SyntheticTransform {
    /// Evaluate the pre-noise target for one source record, in f64.
    pub fn apply(&self, source: &Array<f32>) -> Result<Array<f64>> {
        let (l, c) = source.shape().rank2()?;
        match self {
            SyntheticTransform::Orthogonal { q } => rotate_rows(source, None, q, l, c),
            SyntheticTransform::PermutedOrthogonal { perm, q } => {
                rotate_rows(source, Some(perm), q, l, c)
            }
            SyntheticTransform::TwoLayerNet { w1, b1, w2, b2, l_out, c_out } => {
                let (n_in, hidden) = w1.shape().rank2()?;
                if n_in != l * c {
                    return Err(Error::ShapeMismatch {
                        op: "synthetic_transform",
                        detail: format!("record {} vs net input {n_in}", l * c),
                    });
                }
                let mut h = vec![0.0f64; hidden];
                for (j, slot) in h.iter_mut().enumerate() {
                    let mut acc = b1.as_slice()[j];
                    for k in 0..n_in {
                        acc += source.as_slice()[k] as f64 * w1.at2(k, j);
                    }
                    *slot = acc.tanh();
                }
                let n_out = l_out * c_out;
                let mut y = vec![0.0f64; n_out];
                for (j, slot) in y.iter_mut().enumerate() {
                    let mut acc = b2.as_slice()[j];
                    for (k, hv) in h.iter().enumerate() {
                        acc += hv * w2.at2(k, j);
                    }
                    *slot = acc;
                }
                Array::from_vec(Shape::matrix(*l_out, *c_out)?, y)
            }
        }
    }
}

fn rotate_rows(
    source: &Array<f32>,
    perm: Option<&[usize]>,
    q: &Array<f64>,
    l: usize,
    c: usize,
) -> Result<Array<f64>> {
    let (qc, _) = q.shape().rank2()?;
    if qc != c {
        return Err(Error::ShapeMismatch {
            op: "synthetic_transform",
            detail: format!("rotation is {qc}x{qc} but records have {c} channels"),
        });
    }
    let mut out = vec![0.0f64; l * c];
    for i in 0..l {
        let src_row = perm.map_or(i, |p| p[i]);
        for j in 0..c {
            let mut acc = 0.0;
            for k in 0..c {
                acc += source.at2(src_row, k) as f64 * q.at2(k, j);
            }
            out[i * c + j] = acc;
        }
    }
    Array::from_vec(Shape::matrix(l, c)?, out)
}

/// Orthogonal matrix from the QR decomposition of a seeded Gaussian matrix,
/// with the R diagonal sign-fixed so the result is a deterministic function
/// of the drawn entries.
fn seeded_orthogonal(rng: &mut ChaCha12Rng, n: usize) -> Array<f64> {
    let gaussian = DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    let qr = gaussian.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let data: Vec<f64> = (0..n * n).map(|idx| q[(idx / n, idx % n)]).collect();
    Array::from_vec(Shape::matrix(n, n).expect("n >= 1"), data).expect("n x n data")
}

fn build_transform(
    spec: &SyntheticEncoderSpec,
    rng: &mut ChaCha12Rng,
) -> SyntheticTransform {
    match spec.transform {
        TransformKind::OrthogonalRotation => {
            SyntheticTransform::Orthogonal { q: seeded_orthogonal(rng, spec.c_in) }
        }
        TransformKind::TokenPermutationRotation => {
            let mut perm: Vec<usize> = (0..spec.l_in).collect();
            for i in (1..spec.l_in).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            SyntheticTransform::PermutedOrthogonal {
                perm,
                q: seeded_orthogonal(rng, spec.c_in),
            }
        }
        TransformKind::RandomTwoLayerNet => {
            let n_in = spec.l_in * spec.c_in;
            let n_out = spec.l_out * spec.c_out;
            let hidden = n_in.max(n_out);
            let mut draw_matrix = |rows: usize, cols: usize, scale: f64| {
                let data: Vec<f64> = (0..rows * cols)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                    .collect();
                Array::from_vec(Shape::matrix(rows, cols).expect("extents"), data)
                    .expect("matrix data")
            };
            let w1 = draw_matrix(n_in, hidden, 1.0 / (n_in as f64).sqrt());
            let w2 = draw_matrix(hidden, n_out, 1.0 / (hidden as f64).sqrt());
            let draw_bias = |rng: &mut ChaCha12Rng, n: usize| {
                let data: Vec<f64> = (0..n)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.1)
                    .collect();
                Array::from_vec(Shape::vector(n).expect("extents"), data).expect("bias data")
            };
            let b1 = draw_bias(rng, hidden);
            let b2 = draw_bias(rng, n_out);
            SyntheticTransform::TwoLayerNet {
                w1,
                b1,
                w2,
                b2,
                l_out: spec.l_out,
                c_out: spec.c_out,
            }
        }
    }
}

/// Generate `count` aligned record pairs: sources are i.i.d. standard
/// normal, targets are the fixed transform of the stored (already-rounded)
/// source plus `N(0, noise_sigma^2)` per element.
pub fn gen_synthetic_pair(
    spec: &SyntheticEncoderSpec,
    count: usize,
) -> Result<(ParallelCorpus, SyntheticTransform)> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let transform = build_transform(spec, &mut rng);
    let rec_in = spec.l_in * spec.c_in;
    let mut source_data = Vec::with_capacity(count * rec_in);
    let mut target_data = Vec::with_capacity(count * spec.l_out * spec.c_out);
    for _ in 0..count {
        let src: Vec<f32> = (0..rec_in)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect();
        let src_arr = Array::from_vec(Shape::matrix(spec.l_in, spec.c_in)?, src)?;
        let pre = transform.apply(&src_arr)?;
        for &v in pre.as_slice() {
            let noised = if spec.noise_sigma > 0.0 {
                v + rng.sample::<f64, _>(StandardNormal) * spec.noise_sigma
            } else {
                v
            };
            target_data.push(noised as f32);
        }
        source_data.extend_from_slice(src_arr.as_slice());
    }
    let source = EmbeddingStore::new(spec.l_in, spec.c_in, source_data, None)?;
    let target = EmbeddingStore::new(spec.l_out, spec.c_out, target_data, None)?;
    Ok((pair_stores(source, target)?, transform))
}
