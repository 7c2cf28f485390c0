//! Inference-time operators: top-K token fusion across two modalities,
//! token dissimilarity analysis, and classifier-free guidance combination.
//!
//! All three are pure functions over plain arrays — no tape involvement —
//! since they run after training on already-computed embeddings.

use crate::error::{Error, Result};
use crate::tensor::{Array, Element, Shape};

/// Default fusion window, the midpoint of the useful 4..=8 range.
pub const DEFAULT_FUSION_K: usize = 6;

/// Window size for [`topk_fuse`]: the first `k` tokens of each modality are
/// kept verbatim, so both prefixes plus a nonempty averaged middle must fit
/// (`1 <= k` and `2k < L`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionParams {
    pub k: usize,
}

impl FusionParams {
    pub fn new(k: usize) -> Self {
        FusionParams { k }
    }

    /// Check the window against a concrete token length.
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.k < 1 || 2 * self.k >= len {
            return Err(Error::FusionWindow { k: self.k, len });
        }
        Ok(())
    }
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams { k: DEFAULT_FUSION_K }
    }
}

/// Guidance weight for [`guidance_combine`]; nonnegative and finite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceParams {
    pub s: f64,
}

impl GuidanceParams {
    pub fn new(s: f64) -> Self {
        GuidanceParams { s }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.s.is_finite() || self.s < 0.0 {
            return Err(Error::Config(format!(
                "guidance weight must be finite and nonnegative, got {}",
                self.s
            )));
        }
        Ok(())
    }
}

/// Fuse two equally-shaped token sequences: the output keeps `a`'s first
/// `k` tokens, then `b`'s first `k`, and fills the rest with the elementwise
/// average of the sources at positions `k..L-k` (dropping both tails).
pub fn topk_fuse<E: Element>(
    a: &Array<E>,
    b: &Array<E>,
    p: &FusionParams,
) -> Result<Array<E>> {
    let (l, c) = a.shape().rank2()?;
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "topk_fuse",
            detail: format!("{} vs {}", a.shape(), b.shape()),
        });
    }
    p.validate(l)?;
    let k = p.k;
    let half = E::from_f64(0.5);
    let mut out = vec![E::ZERO; l * c];
    for pos in 0..l {
        for col in 0..c {
            out[pos * c + col] = if pos < k {
                a.at2(pos, col)
            } else if pos < 2 * k {
                b.at2(pos - k, col)
            } else {
                (a.at2(pos - k, col) + b.at2(pos - k, col)) * half
            };
        }
    }
    Array::from_vec(Shape::matrix(l, c)?, out)
}

/// Mean pairwise token distances over a batch: entry `(i, j)` is the batch
/// mean of the Euclidean distance between tokens `i` and `j`. The result is
/// symmetric with an exactly zero diagonal.
pub fn dissimilarity_map<E: Element>(batch: &[Array<E>]) -> Result<Array<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (l, c) = batch[0].shape().rank2()?;
    let mut sums = vec![0.0f64; l * l];
    for seq in batch {
        let (sl, sc) = seq.shape().rank2()?;
        if (sl, sc) != (l, c) {
            return Err(Error::ShapeMismatch {
                op: "dissimilarity_map",
                detail: format!("sequence {} in a {l}x{c} batch", seq.shape()),
            });
        }
        for i in 0..l {
            for j in (i + 1)..l {
                let mut sq = 0.0;
                for col in 0..c {
                    let d = seq.at2(i, col).to_f64() - seq.at2(j, col).to_f64();
                    sq += d * d;
                }
                let dist = sq.sqrt();
                sums[i * l + j] += dist;
                sums[j * l + i] += dist;
            }
        }
    }
    let n = batch.len() as f64;
    for v in &mut sums {
        *v /= n;
    }
    Array::from_vec(Shape::matrix(l, l)?, sums)
}

/// Classifier-free guidance: `eps_uncond + s * (eps_cond - eps_uncond)`.
/// The endpoints `s = 0` and `s = 1` return the respective input bit-exactly.
pub fn guidance_combine<E: Element>(
    eps_uncond: &Array<E>,
    eps_cond: &Array<E>,
    g: &GuidanceParams,
) -> Result<Array<E>> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(Error::ShapeMismatch {
            op: "guidance_combine",
            detail: format!("{} vs {}", eps_uncond.shape(), eps_cond.shape()),
        });
    }
    g.validate()?;
    if g.s == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if g.s == 1.0 {
        return Ok(eps_cond.clone());
    }
    let s = E::from_f64(g.s);
    let data: Vec<E> = eps_uncond
        .as_slice()
        .iter()
        .zip(eps_cond.as_slice())
        .map(|(&u, &c)| u + s * (c - u))
        .collect();
    Array::from_vec(eps_uncond.shape().clone(), data)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    use super::*;

    fn rand_matrix(seed: u64, l: usize, c: usize) -> Array<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..l * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        Array::matrix(l, c, &data).unwrap()
    }

    fn row(a: &Array<f64>, i: usize) -> Vec<f64> {
        let (_, c) = a.shape().rank2().unwrap();
        (0..c).map(|j| a.at2(i, j)).collect()
    }

    // -- topk_fuse --

    #[test]
    fn equal_inputs_reproduce_prefix_and_interior() {
        let a = rand_matrix(1, 8, 3);
        let out = topk_fuse(&a, &a, &FusionParams::new(2)).unwrap();
        let expect_rows = [0, 1, 0, 1, 2, 3, 4, 5];
        for (pos, &src) in expect_rows.iter().enumerate() {
            assert_eq!(row(&out, pos), row(&a, src), "position {pos}");
        }
    }

    #[test]
    fn constant_inputs_average_to_midpoint() {
        let a = Array::full(Shape::matrix(6, 2).unwrap(), 1.0);
        let b = Array::full(Shape::matrix(6, 2).unwrap(), 3.0);
        let out = topk_fuse(&a, &b, &FusionParams::new(2)).unwrap();
        let want = [1.0, 1.0, 3.0, 3.0, 2.0, 2.0];
        for (pos, &w) in want.iter().enumerate() {
            assert_eq!(row(&out, pos), vec![w, w], "position {pos}");
        }
    }

    #[test]
    fn random_inputs_match_index_map_oracle() {
        let a = rand_matrix(2, 10, 4);
        let b = rand_matrix(3, 10, 4);
        let k = 4;
        let out = topk_fuse(&a, &b, &FusionParams::new(k)).unwrap();
        for pos in 0..10 {
            for col in 0..4 {
                let want = if pos < k {
                    a.at2(pos, col)
                } else if pos < 2 * k {
                    b.at2(pos - k, col)
                } else {
                    (a.at2(pos - k, col) + b.at2(pos - k, col)) / 2.0
                };
                assert_eq!(out.at2(pos, col), want, "({pos},{col})");
            }
        }
    }

    #[test]
    fn self_fusion_interior_is_exact() {
        let a = rand_matrix(4, 12, 5);
        let k = 3;
        let out = topk_fuse(&a, &a, &FusionParams::new(k)).unwrap();
        for (pos, src) in (2 * k..12).zip(k..) {
            assert_eq!(row(&out, pos), row(&a, src));
        }
    }

    #[test]
    fn swapping_inputs_swaps_prefixes_and_keeps_interior() {
        let a = rand_matrix(5, 9, 3);
        let b = rand_matrix(6, 9, 3);
        let p = FusionParams::new(2);
        let ab = topk_fuse(&a, &b, &p).unwrap();
        let ba = topk_fuse(&b, &a, &p).unwrap();
        for pos in 4..9 {
            assert_eq!(row(&ab, pos), row(&ba, pos), "interior {pos}");
        }
        for pos in 0..2 {
            assert_eq!(row(&ab, pos), row(&a, pos));
            assert_eq!(row(&ba, pos), row(&b, pos));
            assert_eq!(row(&ab, pos + 2), row(&b, pos));
            assert_eq!(row(&ba, pos + 2), row(&a, pos));
        }
    }

    #[test]
    fn oversized_window_is_rejected() {
        let a = rand_matrix(7, 6, 2);
        for k in [0, 3, 4] {
            assert!(matches!(
                topk_fuse(&a, &a, &FusionParams::new(k)),
                Err(Error::FusionWindow { .. })
            ));
        }
        // k=2, L=6 satisfies 2k < L.
        assert!(topk_fuse(&a, &a, &FusionParams::new(2)).is_ok());
    }

    #[test]
    fn fuse_shape_mismatch_is_rejected() {
        let a = rand_matrix(8, 6, 2);
        let b = rand_matrix(9, 6, 3);
        assert!(matches!(
            topk_fuse(&a, &b, &FusionParams::new(1)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn default_window_is_six() {
        assert_eq!(FusionParams::default().k, DEFAULT_FUSION_K);
        assert_eq!(DEFAULT_FUSION_K, 6);
    }

    // -- dissimilarity_map --

    #[test]
    fn diagonal_is_exactly_zero() {
        let batch: Vec<Array<f64>> = (0..3).map(|i| rand_matrix(10 + i, 7, 4)).collect();
        let m = dissimilarity_map(&batch).unwrap();
        for i in 0..7 {
            assert_eq!(m.at2(i, i), 0.0);
        }
    }

    #[test]
    fn unit_basis_tokens_are_sqrt_two_apart() {
        let seq = Array::matrix(2, 2, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = dissimilarity_map(&[seq]).unwrap();
        assert!((m.at2(0, 1) - 2.0f64.sqrt()).abs() < 1e-12);
        assert!((m.at2(1, 0) - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn random_batch_matches_double_loop_oracle() {
        let batch: Vec<Array<f64>> = (0..4).map(|i| rand_matrix(20 + i, 5, 6)).collect();
        let m = dissimilarity_map(&batch).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let mut want = 0.0;
                for seq in &batch {
                    let mut sq = 0.0;
                    for col in 0..6 {
                        let d = seq.at2(i, col) - seq.at2(j, col);
                        sq += d * d;
                    }
                    want += sq.sqrt();
                }
                want /= batch.len() as f64;
                assert!((m.at2(i, j) - want).abs() < 1e-9, "({i},{j})");
                assert!((m.at2(i, j) - m.at2(j, i)).abs() < 1e-12, "symmetry ({i},{j})");
            }
        }
    }

    #[test]
    fn triangle_inequality_holds() {
        let batch: Vec<Array<f64>> = (0..3).map(|i| rand_matrix(30 + i, 6, 4)).collect();
        let m = dissimilarity_map(&batch).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                for k in 0..6 {
                    assert!(
                        m.at2(i, j) <= m.at2(i, k) + m.at2(k, j) + 1e-12,
                        "({i},{j},{k})"
                    );
                }
            }
        }
    }

    #[test]
    fn empty_dissimilarity_batch_is_rejected() {
        let batch: Vec<Array<f64>> = Vec::new();
        assert!(matches!(dissimilarity_map(&batch), Err(Error::EmptyBatch)));
    }

    // -- guidance_combine --

    #[test]
    fn unit_weight_returns_conditional_bit_exactly() {
        let u = rand_matrix(40, 4, 3);
        let c = rand_matrix(41, 4, 3);
        let out = guidance_combine(&u, &c, &GuidanceParams::new(1.0)).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn zero_weight_returns_unconditional_bit_exactly() {
        let u = rand_matrix(42, 4, 3);
        let c = rand_matrix(43, 4, 3);
        let out = guidance_combine(&u, &c, &GuidanceParams::new(0.0)).unwrap();
        assert_eq!(out, u);
    }

    #[test]
    fn hand_case_at_seven_point_five() {
        let u = Array::vector(&[0.0, 0.0]).unwrap();
        let c = Array::vector(&[1.0, 2.0]).unwrap();
        let out = guidance_combine(&u, &c, &GuidanceParams::new(7.5)).unwrap();
        assert_eq!(out.as_slice(), &[7.5, 15.0]);
    }

    #[test]
    fn combination_is_affine_in_s() {
        let u = rand_matrix(44, 3, 5);
        let c = rand_matrix(45, 3, 5);
        let at = |s: f64| guidance_combine(&u, &c, &GuidanceParams::new(s)).unwrap();
        let (lo, mid, hi) = (at(2.0), at(5.0), at(8.0));
        for idx in 0..15 {
            let interp = (lo.as_slice()[idx] + hi.as_slice()[idx]) / 2.0;
            let direct = mid.as_slice()[idx];
            let rel = (interp - direct).abs() / direct.abs().max(1e-9);
            assert!(rel < 1e-6, "index {idx}: {interp} vs {direct}");
        }
    }

    #[test]
    fn guidance_rejects_bad_weights_and_shapes() {
        let u = rand_matrix(46, 2, 2);
        let c = rand_matrix(47, 2, 2);
        assert!(guidance_combine(&u, &c, &GuidanceParams::new(-1.0)).is_err());
        assert!(guidance_combine(&u, &c, &GuidanceParams::new(f64::NAN)).is_err());
        let wide = rand_matrix(48, 2, 3);
        assert!(matches!(
            guidance_combine(&u, &wide, &GuidanceParams::new(2.0)),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
