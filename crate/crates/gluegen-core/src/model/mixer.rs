//! Mixer block: a token-axis sub-block followed by a channel-axis sub-block.
//!
//! Each residual sub-block is the 3-layer stack Linear-LN-GELU,
//! Linear-LN-GELU, Linear, wrapped by a skip connection (the layer norms can
//! be switched off for the tail). Two placement rules keep the network
//! trainable. First, layer norms only ever live inside a residual wrap:
//! layer normalization is invariant to positive rescaling of its input row,
//! so on a path with no skip around it each norm permanently discards the
//! per-row scale of whatever reached it — a conversion block built that way
//! could never track targets whose magnitude carries information.
//! Non-residual sub-blocks are therefore the plain stack Linear-GELU,
//! Linear-GELU, Linear: a simple feature transformation that preserves
//! everything. Second, every branch ends in a bare linear, never a norm: a
//! trailing norm would pin the branch to unit variance at initialization,
//! swamping the skip path with noise the optimizer must first learn to
//! suppress, where a linear tail leaves the whole stack near the identity
//! from the start. The token-axis sub-block operates on channel columns —
//! realized by transposing to C x L, running the stack, and transposing
//! back — the channel-axis sub-block operates on token rows directly.
//! Initialization, forward evaluation, and parameter counting all live here
//! so they cannot drift apart.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tensor::{Array, Element, ParameterStore, Shape, Tape, Tensor, ValueId};

use super::config::LAYER_NORM_EPS;

/// Dimensions of one mixer block: the token sub-block maps `l_in -> l_out`
/// through hidden width `l_hidden`, the channel sub-block maps
/// `c_in -> c_out` through `c_hidden`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockDims {
    pub l_in: usize,
    pub l_out: usize,
    pub l_hidden: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub c_hidden: usize,
}

// ---- initialization ---------------------------------------------------------

pub(crate) fn init_linear<E: Element>(
    rng: &mut ChaCha12Rng,
    store: &mut ParameterStore<E>,
    prefix: &str,
    layer: usize,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let mut w = vec![E::ZERO; fan_in * fan_out];
    for slot in &mut w {
        *slot = E::from_f64(rng.random_range(-bound..bound));
    }
    store.insert(
        &format!("{prefix}.w{layer}"),
        Tensor::new(Array::from_vec(Shape::matrix(fan_in, fan_out)?, w)?, true),
    )?;
    store.insert(
        &format!("{prefix}.b{layer}"),
        Tensor::new(Array::zeros(Shape::vector(fan_out)?), true),
    )?;
    Ok(())
}

/// Zero weight and bias: the closing linear of a residual branch starts at
/// zero so the wrapped block begins as the exact identity.
fn init_zero_linear<E: Element>(
    store: &mut ParameterStore<E>,
    prefix: &str,
    layer: usize,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.insert(
        &format!("{prefix}.w{layer}"),
        Tensor::new(Array::zeros(Shape::matrix(fan_in, fan_out)?), true),
    )?;
    store.insert(
        &format!("{prefix}.b{layer}"),
        Tensor::new(Array::zeros(Shape::vector(fan_out)?), true),
    )?;
    Ok(())
}

fn init_layer_norm<E: Element>(
    store: &mut ParameterStore<E>,
    prefix: &str,
    layer: usize,
    width: usize,
) -> Result<()> {
    store.insert(
        &format!("{prefix}.ln{layer}.gamma"),
        Tensor::new(Array::full(Shape::vector(width)?, E::ONE), true),
    )?;
    store.insert(
        &format!("{prefix}.ln{layer}.beta"),
        Tensor::new(Array::zeros(Shape::vector(width)?), true),
    )?;
    Ok(())
}

fn init_sub_block<E: Element>(
    rng: &mut ChaCha12Rng,
    store: &mut ParameterStore<E>,
    prefix: &str,
    n_in: usize,
    hidden: usize,
    n_out: usize,
    with_ln: bool,
    residual: bool,
) -> Result<()> {
    let widths = [(n_in, hidden), (hidden, hidden), (hidden, n_out)];
    for (i, (fan_in, fan_out)) in widths.into_iter().enumerate() {
        if i == 2 && residual {
            init_zero_linear(store, prefix, i + 1, fan_in, fan_out)?;
        } else {
            init_linear(rng, store, prefix, i + 1, fan_in, fan_out)?;
        }
        if with_ln && i < 2 {
            init_layer_norm(store, prefix, i + 1, fan_out)?;
        }
    }
    Ok(())
}

/// Create the parameters of one mixer block under `prefix`. `residual` and
/// `with_ln` must match the later forward call: together they decide whether
/// the layer-norm parameters exist (norms only live inside residual wraps)
/// and whether the closing linears start at zero (residual blocks begin as
/// the identity).
pub(crate) fn init_block<E: Element>(
    rng: &mut ChaCha12Rng,
    store: &mut ParameterStore<E>,
    prefix: &str,
    dims: BlockDims,
    residual: bool,
    with_ln: bool,
) -> Result<()> {
    let ln = with_ln && residual;
    init_sub_block(
        rng,
        store,
        &format!("{prefix}.token_mlp"),
        dims.l_in,
        dims.l_hidden,
        dims.l_out,
        ln,
        residual,
    )?;
    init_sub_block(
        rng,
        store,
        &format!("{prefix}.channel_mlp"),
        dims.c_in,
        dims.c_hidden,
        dims.c_out,
        ln,
        residual,
    )
}

// ---- parameter counting -----------------------------------------------------

fn sub_block_param_count(n_in: usize, hidden: usize, n_out: usize, with_ln: bool) -> u64 {
    let widths = [(n_in, hidden), (hidden, hidden), (hidden, n_out)];
    widths
        .into_iter()
        .enumerate()
        .map(|(i, (fan_in, fan_out))| {
            let linear = (fan_in * fan_out + fan_out) as u64;
            let ln = if with_ln && i < 2 { 2 * fan_out as u64 } else { 0 };
            linear + ln
        })
        .sum()
}

/// Closed-form parameter count of one mixer block.
pub(crate) fn block_param_count(dims: BlockDims, residual: bool, with_ln: bool) -> u64 {
    let ln = with_ln && residual;
    sub_block_param_count(dims.l_in, dims.l_hidden, dims.l_out, ln)
        + sub_block_param_count(dims.c_in, dims.c_hidden, dims.c_out, ln)
}

// ---- forward ----------------------------------------------------------------

/// Run one 3-layer stack on `x` (rows are the mixed axis's complement:
/// features along columns).
fn sub_block_forward<E: Element>(
    tape: &mut Tape<E>,
    store: &ParameterStore<E>,
    prefix: &str,
    x: ValueId,
    with_ln: bool,
) -> Result<ValueId> {
    let mut y = x;
    for layer in 1..=3 {
        let w = tape.param(store, &format!("{prefix}.w{layer}"))?;
        let b = tape.param(store, &format!("{prefix}.b{layer}"))?;
        y = tape.matmul(y, w)?;
        y = tape.add_bias(y, b)?;
        if with_ln && layer < 3 {
            let gamma = tape.param(store, &format!("{prefix}.ln{layer}.gamma"))?;
            let beta = tape.param(store, &format!("{prefix}.ln{layer}.beta"))?;
            y = tape.layer_norm(y, gamma, beta, LAYER_NORM_EPS)?;
        }
        if layer < 3 {
            y = tape.gelu(y)?;
        }
    }
    Ok(y)
}

fn maybe_residual<E: Element>(
    tape: &mut Tape<E>,
    x: ValueId,
    y: ValueId,
    residual: bool,
) -> Result<ValueId> {
    if !residual {
        return Ok(y);
    }
    if tape.value(x).shape() != tape.value(y).shape() {
        return Err(Error::Config(format!(
            "residual requested but extents change: {} -> {}",
            tape.value(x).shape(),
            tape.value(y).shape()
        )));
    }
    tape.add(x, y)
}

/// Evaluate one mixer block stored under `prefix` on the `L x C` value `x`.
///
/// The token-axis sub-block runs first (on the transposed `C x L` view),
/// then the channel-axis sub-block. `residual` wraps each sub-block and
/// errors when extents change; both flags must match how the block was
/// initialized, since together they decide which layer-norm parameters
/// exist (norms only live inside residual wraps).
pub fn mixer_block<E: Element>(
    tape: &mut Tape<E>,
    store: &ParameterStore<E>,
    prefix: &str,
    x: ValueId,
    residual: bool,
    with_ln: bool,
) -> Result<ValueId> {
    let ln = with_ln && residual;
    let xt = tape.transpose(x)?;
    let yt = sub_block_forward(tape, store, &format!("{prefix}.token_mlp"), xt, ln)?;
    let y = tape.transpose(yt)?;
    let u = maybe_residual(tape, x, y, residual)?;
    let z = sub_block_forward(tape, store, &format!("{prefix}.channel_mlp"), u, ln)?;
    maybe_residual(tape, u, z, residual)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Zero every linear weight matrix (`.w1/.w2/.w3`) whose name starts
    /// with one of the given prefixes. Biases, gammas, betas are untouched.
    pub fn zero_weights<E: Element>(store: &mut ParameterStore<E>, prefixes: &[&str]) {
        let names: Vec<String> = store
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| {
                prefixes.iter().any(|p| n.starts_with(p))
                    && (n.ends_with(".w1") || n.ends_with(".w2") || n.ends_with(".w3"))
            })
            .collect();
        for name in names {
            let t = store.get_mut(&name).unwrap();
            let zero = Array::zeros(t.value().shape().clone());
            *t.value_mut() = zero;
        }
    }

    /// Straight-line re-implementation of one mixer block with plain loops;
    /// no tape, no shared forward code.
    pub fn oracle_block(
        store: &ParameterStore<f64>,
        prefix: &str,
        x: &[Vec<f64>],
        residual: bool,
        with_ln: bool,
    ) -> Vec<Vec<f64>> {
        let ln_present = with_ln && residual;
        let get = |name: &str| store.get(name).unwrap().value().clone();
        let gelu = |v: f64| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
        let run_stack = |name: &str, input: &[Vec<f64>]| -> Vec<Vec<f64>> {
            let mut cur: Vec<Vec<f64>> = input.to_vec();
            for layer in 1..=3 {
                let w = get(&format!("{prefix}.{name}.w{layer}"));
                let b = get(&format!("{prefix}.{name}.b{layer}"));
                let (fan_in, fan_out) = w.shape().rank2().unwrap();
                let mut next = vec![vec![0.0; fan_out]; cur.len()];
                for (row_out, row_in) in next.iter_mut().zip(&cur) {
                    assert_eq!(row_in.len(), fan_in);
                    for (j, slot) in row_out.iter_mut().enumerate() {
                        let mut acc = b.as_slice()[j];
                        for k in 0..fan_in {
                            acc += row_in[k] * w.at2(k, j);
                        }
                        *slot = acc;
                    }
                }
                if ln_present && layer < 3 {
                    let gamma = get(&format!("{prefix}.{name}.ln{layer}.gamma"));
                    let beta = get(&format!("{prefix}.{name}.ln{layer}.beta"));
                    for row in &mut next {
                        let n = row.len() as f64;
                        let mean: f64 = row.iter().sum::<f64>() / n;
                        let var: f64 =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        for (j, v) in row.iter_mut().enumerate() {
                            *v = gamma.as_slice()[j] * (*v - mean) * inv + beta.as_slice()[j];
                        }
                    }
                }
                if layer < 3 {
                    for row in &mut next {
                        for v in row.iter_mut() {
                            *v = gelu(*v);
                        }
                    }
                }
                cur = next;
            }
            cur
        };

        let l = x.len();
        let c = x[0].len();
        // Token sub-block on columns.
        let cols: Vec<Vec<f64>> = (0..c).map(|j| (0..l).map(|i| x[i][j]).collect()).collect();
        let mixed_cols = run_stack("token_mlp", &cols);
        let l_out = mixed_cols[0].len();
        let mut u: Vec<Vec<f64>> = (0..l_out)
            .map(|i| (0..c).map(|j| mixed_cols[j][i]).collect())
            .collect();
        if residual {
            assert_eq!(l_out, l, "residual oracle requires square token extents");
            for (ui, xi) in u.iter_mut().zip(x) {
                for (uv, xv) in ui.iter_mut().zip(xi) {
                    *uv += *xv;
                }
            }
        }
        // Channel sub-block on rows.
        let mut out = run_stack("channel_mlp", &u);
        if residual {
            assert_eq!(out[0].len(), c, "residual oracle requires square channel extents");
            for (oi, ui) in out.iter_mut().zip(&u) {
                for (ov, uv) in oi.iter_mut().zip(ui) {
                    *ov += *uv;
                }
            }
        }
        out
    }
}
