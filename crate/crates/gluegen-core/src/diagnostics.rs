//! Feature-space inspection: 2-D PCA projections of embedding groups and
//! CSV export for projections and dissimilarity maps.
//!
//! The projection is deliberately PCA rather than a stochastic neighbor
//! embedding: it is deterministic, needs no tuning, and still answers the
//! question the plots exist for — whether translated features land near
//! their targets. Only the top two principal directions are ever needed, so
//! they come from a matrix-free power method with deflation instead of a
//! full eigendecomposition.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Array, Element};

/// Power-method convergence tolerance on the direction change per iteration.
const POWER_TOL: f64 = 1e-7;
/// Power-method iteration cap; ties (isotropic data) stop here.
const POWER_MAX_ITERS: usize = 1000;
/// Fixed seed for the deterministic start vectors.
const POWER_INIT_SEED: u64 = 0xD1A6;

/// A 2-D projection of every record across the named groups.
#[derive(Clone, Debug)]
pub struct ProjectionResult {
    /// One `[x, y]` coordinate per record, groups concatenated in call order.
    pub points: Vec<[f64; 2]>,
    /// The group name each point came from, parallel to `points`.
    pub labels: Vec<String>,
    /// Variance along the two principal directions, nonincreasing.
    pub explained_variance: [f64; 2],
    /// The two principal directions (unit length, mutually orthogonal).
    pub directions: [Vec<f64>; 2],
}

/// Project every sequence in `groups` onto the top-2 principal directions of
/// the joint, mean-centered point cloud.
///
/// Each sequence becomes one point: flattened to an `L·C` vector when every
/// sequence shares the same extents, mean-pooled over tokens to a `C` vector
/// when token counts differ anywhere. Requires at least 3 records total and
/// nonzero joint variance.
pub fn pca_project<E: Element>(groups: &[(&str, &[Array<E>])]) -> Result<ProjectionResult> {
    let total: usize = groups.iter().map(|(_, seqs)| seqs.len()).sum();
    if total < 3 {
        return Err(Error::Diagnostics(format!(
            "need at least 3 records to project, got {total}"
        )));
    }
    let vectors = flatten_groups(groups)?;
    let d = vectors[0].len();
    let n = vectors.len();

    // Joint mean-centering.
    let mut mean = vec![0.0f64; d];
    for row in &vectors {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centered = vec![0.0f64; n * d];
    for (i, row) in vectors.iter().enumerate() {
        for (j, x) in row.iter().enumerate() {
            centered[i * d + j] = x - mean[j];
        }
    }
    let total_variance: f64 =
        centered.iter().map(|x| x * x).sum::<f64>() / (n as f64 - 1.0);
    if total_variance <= 0.0 {
        return Err(Error::Diagnostics("joint variance is zero".into()));
    }

    let cov = CovOp { data: &centered, n, d };
    let mut rng = ChaCha12Rng::seed_from_u64(POWER_INIT_SEED);
    let (lambda1, v1) = power_iterate(&cov, &mut rng, None)?;
    let (lambda2, v2) = power_iterate(&cov, &mut rng, Some((&v1, lambda1)))?;
    // Dominant direction first; exact ties can land in either order.
    let ((lambda1, v1), (lambda2, v2)) = if lambda2 > lambda1 {
        ((lambda2, v2), (lambda1, v1))
    } else {
        ((lambda1, v1), (lambda2, v2))
    };

    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let row = &centered[i * d..(i + 1) * d];
        points.push([dot(row, &v1), dot(row, &v2)]);
    }
    let mut labels = Vec::with_capacity(n);
    for (name, seqs) in groups {
        labels.extend(std::iter::repeat_n(name.to_string(), seqs.len()));
    }
    Ok(ProjectionResult {
        points,
        labels,
        explained_variance: [lambda1, lambda2],
        directions: [v1, v2],
    })
}

/// Turn every sequence into one f64 vector per the pooling rule.
fn flatten_groups<E: Element>(groups: &[(&str, &[Array<E>])]) -> Result<Vec<Vec<f64>>> {
    let mut tokens: Option<usize> = None;
    let mut dim: Option<usize> = None;
    let mut pooled = false;
    for (name, seqs) in groups {
        for seq in *seqs {
            let (l, c) = seq.shape().rank2().map_err(|_| {
                Error::Diagnostics(format!("group `{name}` holds a non-rank-2 sequence"))
            })?;
            match dim {
                None => dim = Some(c),
                Some(dc) if dc != c => {
                    return Err(Error::Diagnostics(format!(
                        "channel widths differ ({dc} vs {c}); no common vector space"
                    )))
                }
                _ => {}
            }
            match tokens {
                None => tokens = Some(l),
                Some(tl) if tl != l => pooled = true,
                _ => {}
            }
        }
    }
    let mut out = Vec::new();
    for (_, seqs) in groups {
        for seq in *seqs {
            let (l, c) = seq.shape().rank2().expect("checked above");
            let data = seq.as_slice();
            if pooled {
                let mut v = vec![0.0f64; c];
                for row in 0..l {
                    for col in 0..c {
                        v[col] += data[row * c + col].to_f64();
                    }
                }
                for x in &mut v {
                    *x /= l as f64;
                }
                out.push(v);
            } else {
                out.push(data.iter().map(|x| x.to_f64()).collect());
            }
        }
    }
    Ok(out)
}

/// Matrix-free covariance operator `v ↦ Xᵀ(Xv)/(n−1)` over centered rows.
struct CovOp<'a> {
    data: &'a [f64],
    n: usize,
    d: usize,
}

impl CovOp<'_> {
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut xv = vec![0.0f64; self.n];
        for i in 0..self.n {
            xv[i] = dot(&self.data[i * self.d..(i + 1) * self.d], v);
        }
        let mut out = vec![0.0f64; self.d];
        for i in 0..self.n {
            let w = xv[i];
            for (o, x) in out.iter_mut().zip(&self.data[i * self.d..(i + 1) * self.d]) {
                *o += w * x;
            }
        }
        let denom = self.n as f64 - 1.0;
        for o in &mut out {
            *o /= denom;
        }
        out
    }
}

/// Power iteration for the dominant eigenpair of `cov`, optionally deflated
/// by an already-found pair. Returns the Rayleigh quotient and the unit
/// direction with a canonical sign (largest-magnitude entry positive).
fn power_iterate(
    cov: &CovOp,
    rng: &mut ChaCha12Rng,
    deflate: Option<(&[f64], f64)>,
) -> Result<(f64, Vec<f64>)> {
    let d = cov.d;
    let mut v: Vec<f64> = (0..d)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            x
        })
        .collect();
    if let Some((u, _)) = deflate {
        orthogonalize(&mut v, u);
    }
    if normalize(&mut v) == 0.0 {
        return Err(Error::Diagnostics("degenerate start vector".into()));
    }
    for _ in 0..POWER_MAX_ITERS {
        let mut w = cov.apply(&v);
        if let Some((u, lambda)) = deflate {
            // Deflated operator: (C − λ·u·uᵀ)v = Cv − λ·(uᵀv)·u. Two
            // orthogonalization sweeps follow because one sweep leaves a
            // residual parallel to `u` (the coherent rounding error of the
            // projection coefficient); normalizing that residual would turn
            // `u` into a fixed point of the iteration.
            let scale = dot(&w, &w).sqrt().max(lambda.abs());
            let coeff = lambda * dot(u, &v);
            for (wi, ui) in w.iter_mut().zip(u) {
                *wi -= coeff * ui;
            }
            orthogonalize(&mut w, u);
            orthogonalize(&mut w, u);
            if dot(&w, &w).sqrt() <= scale * 1e-12 {
                // The complement of `u` carries no variance to speak of: the
                // data is rank-one. Complete the basis deterministically.
                return Ok((0.0, orthogonal_completion(u)));
            }
        }
        let norm = normalize(&mut w);
        if norm == 0.0 {
            return Err(Error::Diagnostics("power iteration image vanished".into()));
        }
        let delta = v
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        v = w;
        if delta < POWER_TOL {
            break;
        }
    }
    canonical_sign(&mut v);
    let rayleigh = dot(&v, &cov.apply(&v));
    Ok((rayleigh, v))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

fn orthogonalize(v: &mut [f64], u: &[f64]) {
    let proj = dot(v, u);
    for (vi, ui) in v.iter_mut().zip(u) {
        *vi -= proj * ui;
    }
}

/// Flip the vector so its largest-magnitude entry is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut idx = 0;
    let mut best = 0.0f64;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best {
            best = x.abs();
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// A deterministic unit vector orthogonal to `u`: take the basis vector
/// where `u` is smallest and project it out.
fn orthogonal_completion(u: &[f64]) -> Vec<f64> {
    let mut idx = 0;
    let mut best = f64::INFINITY;
    for (i, x) in u.iter().enumerate() {
        if x.abs() < best {
            best = x.abs();
            idx = i;
        }
    }
    let mut v = vec![0.0f64; u.len()];
    v[idx] = 1.0;
    orthogonalize(&mut v, u);
    normalize(&mut v);
    canonical_sign(&mut v);
    v
}

/// Write a projection as CSV: `x,y,label` header, one row per point,
/// 9-significant-digit scientific floats.
pub fn export_projection_csv(result: &ProjectionResult, path: &Path) -> Result<()> {
    let mut out = String::from("x,y,label\n");
    for (point, label) in result.points.iter().zip(&result.labels) {
        writeln!(out, "{:.8e},{:.8e},{label}", point[0], point[1])
            .expect("string writes are infallible");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Write an `L×L` dissimilarity map as CSV: `t0..t{L-1}` header, one row per
/// token, 9-significant-digit scientific floats.
pub fn export_dissimilarity_csv(map: &Array<f64>, path: &Path) -> Result<()> {
    let (rows, cols) = map.shape().rank2()?;
    let mut out = String::new();
    for j in 0..cols {
        if j > 0 {
            out.push(',');
        }
        write!(out, "t{j}").expect("string writes are infallible");
    }
    out.push('\n');
    for i in 0..rows {
        for j in 0..cols {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{:.8e}", map.at2(i, j)).expect("string writes are infallible");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
