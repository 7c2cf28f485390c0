//! Define-by-run reverse-mode autodiff on a Wengert tape.
//!
//! Every forward pass builds a fresh tape: each primitive appends one node
//! holding the computed value and the ids of its inputs. `backward` walks the
//! nodes in reverse, applies each primitive's adjoint rule, and deposits
//! parameter gradients into the owning [`ParameterStore`]s. Tapes are
//! single-threaded and consumed by `backward`; run one tape per thread for
//! batch parallelism.
//!
//! Primitive outputs are checked for NaN/inf as they are produced, so a
//! numeric blowup is reported at the op that created it.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::array::{Array, Shape};
use super::element::Element;
use super::store::ParameterStore;

/// Handle to a value recorded on a tape. Ids are only meaningful on the tape
/// that issued them.
#[derive(Copy, Clone, PartialEq, Eq, Debug, Hash)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op {
    /// Constant or detached input; no adjoint.
    Leaf,
    /// Trainable leaf bound from a parameter store.
    Param { store_id: u64, name: String },
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    /// Matrix plus broadcast row vector.
    AddBias(ValueId, ValueId),
    Scale(ValueId, f64),
    MatMul(ValueId, ValueId),
    Transpose(ValueId),
    /// Keep-dim mean over one axis of a rank-1/2 value.
    MeanAxis(ValueId, usize),
    /// Sum of all elements, producing shape `[1]`.
    SumAll(ValueId),
    /// Concatenation along the leading (token) axis.
    ConcatTokens(ValueId, ValueId),
    /// Row slice `[start, end)` along the leading (token) axis.
    SliceTokens { x: ValueId, start: usize, end: usize },
    LayerNorm { x: ValueId, gamma: ValueId, beta: ValueId, eps: f64 },
    Gelu(ValueId),
    LogSigmoid(ValueId),
    Clamp { x: ValueId, lo: f64, hi: f64 },
}

#[derive(Debug)]
struct Node<E> {
    value: Array<E>,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients left over after a backward pass, for inspection in
/// tests and diagnostics. Parameter gradients are deposited into their
/// stores, not here alone.
#[derive(Debug)]
pub struct Gradients<E> {
    grads: Vec<Option<Array<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of the backward root with respect to the given value, if the
    /// value participated in the graph.
    pub fn get(&self, id: ValueId) -> Option<&Array<E>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Gradient-recording tape.
#[derive(Debug)]
pub struct Tape<E> {
    nodes: Vec<Node<E>>,
    /// Cache of `(store id, param name) -> node`, so each parameter binds to
    /// a single node per pass and gradients from all uses accumulate.
    bindings: HashMap<(u64, String), ValueId>,
    grad_enabled: bool,
}

impl<E: Element> Tape<E> {
    /// Tape that records gradients for bound parameters.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), bindings: HashMap::new(), grad_enabled: true }
    }

    /// Inference tape: parameters bind as constants and backward is a no-op.
    pub fn new_inference() -> Self {
        Tape { nodes: Vec::new(), bindings: HashMap::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn node(&self, id: ValueId) -> &Node<E> {
        assert!(id.0 < self.nodes.len(), "value id from another tape");
        &self.nodes[id.0]
    }

    /// Value held at `id`.
    pub fn value(&self, id: ValueId) -> &Array<E> {
        &self.node(id).value
    }

    /// Extract a one-element value as a scalar.
    pub fn scalar(&self, id: ValueId) -> Result<E> {
        let v = self.value(id);
        if v.numel() != 1 {
            return Err(Error::NotScalar(v.shape().to_string()));
        }
        Ok(v.as_slice()[0])
    }

    fn push(&mut self, op_name: &'static str, value: Array<E>, op: Op, requires_grad: bool) -> Result<ValueId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, requires_grad: requires_grad && self.grad_enabled });
        Ok(ValueId(self.nodes.len() - 1))
    }

    /// Record a constant input. Never receives gradient.
    pub fn constant(&mut self, value: Array<E>) -> ValueId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        ValueId(self.nodes.len() - 1)
    }

    /// Record a one-element constant.
    pub fn constant_scalar(&mut self, v: f64) -> ValueId {
        let arr = Array::from_vec(Shape::vector(1).unwrap(), vec![E::from_f64(v)]).unwrap();
        self.constant(arr)
    }

    /// Bind a named parameter from a store. Repeated binds of the same
    /// parameter return the same node, so gradients from every use
    /// accumulate. On an inference tape the parameter enters as a constant.
    pub fn param(&mut self, store: &ParameterStore<E>, name: &str) -> Result<ValueId> {
        let key = (store.id(), name.to_string());
        if let Some(&id) = self.bindings.get(&key) {
            return Ok(id);
        }
        let tensor = store.get(name)?;
        let requires = self.grad_enabled && tensor.requires_grad();
        let op = if requires {
            Op::Param { store_id: store.id(), name: name.to_string() }
        } else {
            Op::Leaf
        };
        self.nodes.push(Node { value: tensor.value().clone(), op, requires_grad: requires });
        let id = ValueId(self.nodes.len() - 1);
        self.bindings.insert(key, id);
        Ok(id)
    }

    /// Copy a value out of the gradient graph.
    pub fn detach(&mut self, x: ValueId) -> ValueId {
        let value = self.node(x).value.clone();
        self.constant(value)
    }

    // ---- elementwise and broadcast arithmetic --------------------------------

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(E, E) -> E,
        op: Op,
    ) -> Result<ValueId> {
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: op_name,
                detail: format!("{} vs {}", va.shape(), vb.shape()),
            });
        }
        let data: Vec<E> = va
            .as_slice()
            .iter()
            .zip(vb.as_slice())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Array::from_vec(va.shape().clone(), data)?;
        let requires = self.node(a).requires_grad || self.node(b).requires_grad;
        self.push(op_name, value, op, requires)
    }

    /// Elementwise sum of two equal-shape values.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise difference of two equal-shape values.
    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product of two equal-shape values.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `[r x c]` matrix plus `[c]` row vector, broadcast over rows.
    pub fn add_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let vx = &self.node(x).value;
        let vb = &self.node(bias).value;
        let (r, c) = vx.shape().rank2().map_err(|_| Error::ShapeMismatch {
            op: "add_bias",
            detail: format!("matrix operand must be rank 2, got {}", vx.shape()),
        })?;
        if vb.rank() != 1 || vb.numel() != c {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                detail: format!("bias {} does not broadcast over {}", vb.shape(), vx.shape()),
            });
        }
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(vx.at2(i, j) + vb.as_slice()[j]);
            }
        }
        let value = Array::from_vec(vx.shape().clone(), data)?;
        let requires = self.node(x).requires_grad || self.node(bias).requires_grad;
        self.push("add_bias", value, Op::AddBias(x, bias), requires)
    }

    /// Multiply every element by a fixed finite scalar.
    pub fn scale(&mut self, x: ValueId, factor: f64) -> Result<ValueId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let f = E::from_f64(factor);
        let value = self.node(x).value.map(|v| v * f);
        let requires = self.node(x).requires_grad;
        self.push("scale", value, Op::Scale(x, factor), requires)
    }

    // ---- linear algebra ------------------------------------------------------

    /// Row-major matrix product `[m x k] @ [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let va = &self.node(a).value;
        let vb = &self.node(b).value;
        let (m, ka) = va.shape().rank2().map_err(|_| Error::ShapeMismatch {
            op: "matmul",
            detail: format!("lhs must be rank 2, got {}", va.shape()),
        })?;
        let (kb, n) = vb.shape().rank2().map_err(|_| Error::ShapeMismatch {
            op: "matmul",
            detail: format!("rhs must be rank 2, got {}", vb.shape()),
        })?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("inner extents differ: {} vs {}", va.shape(), vb.shape()),
            });
        }
        let mut out = Array::zeros(Shape::matrix(m, n)?);
        E::gemm(
            m,
            ka,
            n,
            E::ONE,
            va.as_slice(),
            ka as isize,
            1,
            vb.as_slice(),
            n as isize,
            1,
            E::ZERO,
            out.as_mut_slice(),
            n as isize,
            1,
        );
        let requires = self.node(a).requires_grad || self.node(b).requires_grad;
        self.push("matmul", out, Op::MatMul(a, b), requires)
    }

    /// Transpose of a rank-2 value.
    pub fn transpose(&mut self, x: ValueId) -> Result<ValueId> {
        let vx = &self.node(x).value;
        let (r, c) = vx.shape().rank2()?;
        let mut data = vec![E::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = vx.at2(i, j);
            }
        }
        let value = Array::from_vec(Shape::matrix(c, r)?, data)?;
        let requires = self.node(x).requires_grad;
        self.push("transpose", value, Op::Transpose(x), requires)
    }

    // ---- reductions ----------------------------------------------------------

    /// Keep-dim mean over `axis`. Rank-1 values admit axis 0 (`[n] -> [1]`);
    /// rank-2 values admit axis 0 (`[r x c] -> [1 x c]`) and axis 1
    /// (`[r x c] -> [r x 1]`).
    pub fn mean_axis(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        let vx = &self.node(x).value;
        let value = match (vx.rank(), axis) {
            (1, 0) => {
                let n = vx.numel();
                let inv = E::from_f64(1.0 / n as f64);
                let mut acc = E::ZERO;
                for &v in vx.as_slice() {
                    acc += v;
                }
                Array::from_vec(Shape::vector(1)?, vec![acc * inv])?
            }
            (2, 0) => {
                let (r, c) = vx.shape().rank2()?;
                let inv = E::from_f64(1.0 / r as f64);
                let mut data = vec![E::ZERO; c];
                for i in 0..r {
                    for (j, slot) in data.iter_mut().enumerate() {
                        *slot += vx.at2(i, j);
                    }
                }
                for slot in &mut data {
                    *slot *= inv;
                }
                Array::from_vec(Shape::matrix(1, c)?, data)?
            }
            (2, 1) => {
                let (r, c) = vx.shape().rank2()?;
                let inv = E::from_f64(1.0 / c as f64);
                let mut data = vec![E::ZERO; r];
                for (i, slot) in data.iter_mut().enumerate() {
                    for j in 0..c {
                        *slot += vx.at2(i, j);
                    }
                    *slot *= inv;
                }
                Array::from_vec(Shape::matrix(r, 1)?, data)?
            }
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "mean_axis",
                    detail: format!("axis {axis} invalid for shape {}", vx.shape()),
                })
            }
        };
        let requires = self.node(x).requires_grad;
        self.push("mean_axis", value, Op::MeanAxis(x, axis), requires)
    }

    /// Sum of every element, as a `[1]` value.
    pub fn sum_all(&mut self, x: ValueId) -> Result<ValueId> {
        let vx = &self.node(x).value;
        let mut acc = E::ZERO;
        for &v in vx.as_slice() {
            acc += v;
        }
        let value = Array::from_vec(Shape::vector(1)?, vec![acc])?;
        let requires = self.node(x).requires_grad;
        self.push("sum", value, Op::SumAll(x), requires)
    }

    // ---- token-axis restructuring ---------------------------------------------

    /// Concatenate along the leading (token) axis. Rank-2 operands must share
    /// their column extent; rank-1 operands concatenate end to end.
    pub fn concat_tokens(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let va = &self.node(a).value;
        let vb = &self.node(b).value;
        let value = match (va.rank(), vb.rank()) {
            (1, 1) => {
                let mut data = va.as_slice().to_vec();
                data.extend_from_slice(vb.as_slice());
                Array::from_vec(Shape::vector(va.numel() + vb.numel())?, data)?
            }
            (2, 2) => {
                let (ra, ca) = va.shape().rank2()?;
                let (rb, cb) = vb.shape().rank2()?;
                if ca != cb {
                    return Err(Error::ShapeMismatch {
                        op: "concat_tokens",
                        detail: format!("column extents differ: {} vs {}", va.shape(), vb.shape()),
                    });
                }
                let mut data = va.as_slice().to_vec();
                data.extend_from_slice(vb.as_slice());
                Array::from_vec(Shape::matrix(ra + rb, ca)?, data)?
            }
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "concat_tokens",
                    detail: format!("ranks {} and {} unsupported", va.rank(), vb.rank()),
                })
            }
        };
        let requires = self.node(a).requires_grad || self.node(b).requires_grad;
        self.push("concat_tokens", value, Op::ConcatTokens(a, b), requires)
    }

    /// Slice rows `[start, end)` along the leading (token) axis.
    pub fn slice_tokens(&mut self, x: ValueId, start: usize, end: usize) -> Result<ValueId> {
        let vx = &self.node(x).value;
        let rows = vx.shape().dims()[0];
        if start >= end || end > rows {
            return Err(Error::InvalidShape(format!(
                "slice [{start}, {end}) out of range for leading extent {rows}"
            )));
        }
        let value = match vx.rank() {
            1 => Array::from_vec(Shape::vector(end - start)?, vx.as_slice()[start..end].to_vec())?,
            2 => {
                let (_, c) = vx.shape().rank2()?;
                Array::from_vec(
                    Shape::matrix(end - start, c)?,
                    vx.as_slice()[start * c..end * c].to_vec(),
                )?
            }
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "slice_tokens",
                    detail: format!("rank {} unsupported", vx.rank()),
                })
            }
        };
        let requires = self.node(x).requires_grad;
        self.push("slice_tokens", value, Op::SliceTokens { x, start, end }, requires)
    }

    // ---- normalization and nonlinearities --------------------------------------

    /// Row-wise layer normalization of `[r x c]` with `[c]` scale and shift:
    /// `y = gamma * (x - mean) / sqrt(var + eps) + beta`, variance computed
    /// per row with the population convention.
    pub fn layer_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId, eps: f64) -> Result<ValueId> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let vx = &self.node(x).value;
        let vg = &self.node(gamma).value;
        let vb = &self.node(beta).value;
        let (r, c) = vx.shape().rank2().map_err(|_| Error::ShapeMismatch {
            op: "layer_norm",
            detail: format!("input must be rank 2, got {}", vx.shape()),
        })?;
        if vg.rank() != 1 || vg.numel() != c || vb.rank() != 1 || vb.numel() != c {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gamma {} / beta {} do not match row width {c}",
                    vg.shape(),
                    vb.shape()
                ),
            });
        }
        let epse = E::from_f64(eps);
        let inv_c = E::from_f64(1.0 / c as f64);
        let mut data = vec![E::ZERO; r * c];
        for i in 0..r {
            let row = &vx.as_slice()[i * c..(i + 1) * c];
            let mut mean = E::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_c;
            let mut var = E::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_c;
            let inv_std = E::ONE / (var + epse).sqrt();
            for j in 0..c {
                let xhat = (row[j] - mean) * inv_std;
                data[i * c + j] = vg.as_slice()[j] * xhat + vb.as_slice()[j];
            }
        }
        let value = Array::from_vec(vx.shape().clone(), data)?;
        let requires = self.node(x).requires_grad
            || self.node(gamma).requires_grad
            || self.node(beta).requires_grad;
        self.push("layer_norm", value, Op::LayerNorm { x, gamma, beta, eps }, requires)
    }

    /// Exact GELU, elementwise.
    pub fn gelu(&mut self, x: ValueId) -> Result<ValueId> {
        let value = self.node(x).value.map(|v| v.gelu());
        let requires = self.node(x).requires_grad;
        self.push("gelu", value, Op::Gelu(x), requires)
    }

    /// Numerically stable `log(sigmoid(x))`, elementwise.
    pub fn log_sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        let value = self.node(x).value.map(|v| v.log_sigmoid());
        let requires = self.node(x).requires_grad;
        self.push("log_sigmoid", value, Op::LogSigmoid(x), requires)
    }

    /// Clamp every element into `[lo, hi]`. Gradient passes through inside
    /// the range and is zero outside.
    pub fn clamp(&mut self, x: ValueId, lo: f64, hi: f64) -> Result<ValueId> {
        if !(lo <= hi) {
            return Err(Error::Config(format!("clamp bounds inverted: [{lo}, {hi}]")));
        }
        let (le, he) = (E::from_f64(lo), E::from_f64(hi));
        let value = self.node(x).value.map(|v| {
            if v < le {
                le
            } else if v > he {
                he
            } else {
                v
            }
        });
        let requires = self.node(x).requires_grad;
        self.push("clamp", value, Op::Clamp { x, lo, hi }, requires)
    }

    // ---- backward ---------------------------------------------------------------

    /// Reverse sweep from a scalar root. Parameter gradients accumulate into
    /// the passed stores (every store whose parameters participated must be
    /// present). The tape is consumed; per-node gradients are returned for
    /// inspection.
    pub fn backward(self, loss: ValueId, stores: &mut [&mut ParameterStore<E>]) -> Result<Gradients<E>> {
        let root = self.node(loss);
        if root.value.numel() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_string()));
        }
        let mut grads: Vec<Option<Array<E>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if root.requires_grad {
            grads[loss.0] = Some(Array::full(root.value.shape().clone(), E::ONE));
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param { store_id, name } => {
                    let store = stores
                        .iter_mut()
                        .find(|s| s.id() == *store_id)
                        .ok_or_else(|| Error::MissingStore {
                            store_id: *store_id,
                            name: name.clone(),
                        })?;
                    store.get_mut(name)?.accumulate_grad(&g);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, |dst| add_assign(dst, g.as_slice()));
                    self.accumulate(&mut grads, *b, |dst| add_assign(dst, g.as_slice()));
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, |dst| add_assign(dst, g.as_slice()));
                    self.accumulate(&mut grads, *b, |dst| sub_assign(dst, g.as_slice()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    self.accumulate(&mut grads, *a, |dst| {
                        for ((d, &gi), &bi) in dst.iter_mut().zip(g.as_slice()).zip(vb.as_slice()) {
                            *d += gi * bi;
                        }
                    });
                    self.accumulate(&mut grads, *b, |dst| {
                        for ((d, &gi), &ai) in dst.iter_mut().zip(g.as_slice()).zip(va.as_slice()) {
                            *d += gi * ai;
                        }
                    });
                }
                Op::AddBias(x, bias) => {
                    let (r, c) = self.nodes[x.0].value.shape().rank2()?;
                    self.accumulate(&mut grads, *x, |dst| add_assign(dst, g.as_slice()));
                    self.accumulate(&mut grads, *bias, |dst| {
                        for i in 0..r {
                            for (j, slot) in dst.iter_mut().enumerate() {
                                *slot += g.as_slice()[i * c + j];
                            }
                        }
                    });
                }
                Op::Scale(x, factor) => {
                    let f = E::from_f64(*factor);
                    self.accumulate(&mut grads, *x, |dst| {
                        for (d, &gi) in dst.iter_mut().zip(g.as_slice()) {
                            *d += gi * f;
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.nodes[a.0].value.shape().rank2()?;
                    let n = self.nodes[b.0].value.shape().dims()[1];
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    // dA += G @ B^T, realized as gemm over B with swapped strides.
                    self.accumulate(&mut grads, *a, |dst| {
                        E::gemm(
                            m,
                            n,
                            k,
                            E::ONE,
                            g.as_slice(),
                            n as isize,
                            1,
                            vb.as_slice(),
                            1,
                            n as isize,
                            E::ONE,
                            dst,
                            k as isize,
                            1,
                        );
                    });
                    // dB += A^T @ G.
                    self.accumulate(&mut grads, *b, |dst| {
                        E::gemm(
                            k,
                            m,
                            n,
                            E::ONE,
                            va.as_slice(),
                            1,
                            k as isize,
                            g.as_slice(),
                            n as isize,
                            1,
                            E::ONE,
                            dst,
                            n as isize,
                            1,
                        );
                    });
                }
                Op::Transpose(x) => {
                    let (r, c) = self.nodes[x.0].value.shape().rank2()?;
                    self.accumulate(&mut grads, *x, |dst| {
                        for i in 0..r {
                            for j in 0..c {
                                dst[i * c + j] += g.as_slice()[j * r + i];
                            }
                        }
                    });
                }
                Op::MeanAxis(x, axis) => {
                    let vx = &self.nodes[x.0].value;
                    match (vx.rank(), *axis) {
                        (1, 0) => {
                            let inv = E::from_f64(1.0 / vx.numel() as f64);
                            let gi = g.as_slice()[0] * inv;
                            self.accumulate(&mut grads, *x, |dst| {
                                for d in dst.iter_mut() {
                                    *d += gi;
                                }
                            });
                        }
                        (2, 0) => {
                            let (r, c) = vx.shape().rank2()?;
                            let inv = E::from_f64(1.0 / r as f64);
                            self.accumulate(&mut grads, *x, |dst| {
                                for i in 0..r {
                                    for j in 0..c {
                                        dst[i * c + j] += g.as_slice()[j] * inv;
                                    }
                                }
                            });
                        }
                        (2, 1) => {
                            let (r, c) = vx.shape().rank2()?;
                            let inv = E::from_f64(1.0 / c as f64);
                            self.accumulate(&mut grads, *x, |dst| {
                                for i in 0..r {
                                    let gi = g.as_slice()[i] * inv;
                                    for j in 0..c {
                                        dst[i * c + j] += gi;
                                    }
                                }
                            });
                        }
                        _ => unreachable!("validated at record time"),
                    }
                }
                Op::SumAll(x) => {
                    let gi = g.as_slice()[0];
                    self.accumulate(&mut grads, *x, |dst| {
                        for d in dst.iter_mut() {
                            *d += gi;
                        }
                    });
                }
                Op::ConcatTokens(a, b) => {
                    let na = self.nodes[a.0].value.numel();
                    self.accumulate(&mut grads, *a, |dst| add_assign(dst, &g.as_slice()[..na]));
                    self.accumulate(&mut grads, *b, |dst| add_assign(dst, &g.as_slice()[na..]));
                }
                Op::SliceTokens { x, start, end } => {
                    let vx = &self.nodes[x.0].value;
                    let row = if vx.rank() == 2 { vx.shape().dims()[1] } else { 1 };
                    let offset = start * row;
                    debug_assert_eq!(g.numel(), (end - start) * row);
                    self.accumulate(&mut grads, *x, |dst| {
                        for (k, &gi) in g.as_slice().iter().enumerate() {
                            dst[offset + k] += gi;
                        }
                    });
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    self.layer_norm_backward(&mut grads, &g, *x, *gamma, *beta, *eps)?;
                }
                Op::Gelu(x) => {
                    let vx = &self.nodes[x.0].value;
                    self.accumulate(&mut grads, *x, |dst| {
                        for ((d, &gi), &xi) in dst.iter_mut().zip(g.as_slice()).zip(vx.as_slice()) {
                            *d += gi * xi.gelu_deriv();
                        }
                    });
                }
                Op::LogSigmoid(x) => {
                    let vx = &self.nodes[x.0].value;
                    self.accumulate(&mut grads, *x, |dst| {
                        for ((d, &gi), &xi) in dst.iter_mut().zip(g.as_slice()).zip(vx.as_slice()) {
                            *d += gi * (-xi).sigmoid();
                        }
                    });
                }
                Op::Clamp { x, lo, hi } => {
                    let (le, he) = (E::from_f64(*lo), E::from_f64(*hi));
                    let vx = &self.nodes[x.0].value;
                    self.accumulate(&mut grads, *x, |dst| {
                        for ((d, &gi), &xi) in dst.iter_mut().zip(g.as_slice()).zip(vx.as_slice()) {
                            if xi >= le && xi <= he {
                                *d += gi;
                            }
                        }
                    });
                }
            }
            grads[i] = Some(g);
        }

        Ok(Gradients { grads })
    }

    /// Apply `f` to the gradient buffer of `target` (allocated on demand),
    /// skipping nodes that do not require gradient.
    fn accumulate(
        &self,
        grads: &mut [Option<Array<E>>],
        target: ValueId,
        f: impl FnOnce(&mut [E]),
    ) {
        let node = &self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        let slot = &mut grads[target.0];
        if slot.is_none() {
            *slot = Some(Array::zeros(node.value.shape().clone()));
        }
        f(slot.as_mut().expect("just ensured").as_mut_slice());
    }

    /// Adjoint of row-wise layer normalization:
    /// with `h = gamma * g`, `dx = (h - mean(h) - xhat * mean(h * xhat)) / std`,
    /// `dgamma = sum_rows(g * xhat)`, `dbeta = sum_rows(g)`.
    fn layer_norm_backward(
        &self,
        grads: &mut [Option<Array<E>>],
        g: &Array<E>,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<()> {
        let vx = &self.nodes[x.0].value;
        let vg = &self.nodes[gamma.0].value;
        let (r, c) = vx.shape().rank2()?;
        let epse = E::from_f64(eps);
        let inv_c = E::from_f64(1.0 / c as f64);

        let mut dx = vec![E::ZERO; r * c];
        let mut dgamma = vec![E::ZERO; c];
        let mut dbeta = vec![E::ZERO; c];
        let mut xhat = vec![E::ZERO; c];

        for i in 0..r {
            let row = &vx.as_slice()[i * c..(i + 1) * c];
            let grow = &g.as_slice()[i * c..(i + 1) * c];
            let mut mean = E::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_c;
            let mut var = E::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_c;
            let inv_std = E::ONE / (var + epse).sqrt();

            let mut m1 = E::ZERO;
            let mut m2 = E::ZERO;
            for j in 0..c {
                xhat[j] = (row[j] - mean) * inv_std;
                let h = vg.as_slice()[j] * grow[j];
                m1 += h;
                m2 += h * xhat[j];
            }
            m1 *= inv_c;
            m2 *= inv_c;
            for j in 0..c {
                let h = vg.as_slice()[j] * grow[j];
                dx[i * c + j] = (h - m1 - xhat[j] * m2) * inv_std;
                dgamma[j] += grow[j] * xhat[j];
                dbeta[j] += grow[j];
            }
        }

        self.accumulate(grads, x, |dst| add_assign(dst, &dx));
        self.accumulate(grads, gamma, |dst| add_assign(dst, &dgamma));
        self.accumulate(grads, beta, |dst| add_assign(dst, &dbeta));
        Ok(())
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_assign<E: Element>(dst: &mut [E], src: &[E]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_assign<E: Element>(dst: &mut [E], src: &[E]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    use super::*;
    use crate::tensor::gradcheck::finite_diff_grad;
    use crate::tensor::store::Tensor;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn rand_matrix(rng: &mut ChaCha12Rng, r: usize, c: usize) -> Array<f64> {
        let data: Vec<f64> = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Array::matrix(r, c, &data).unwrap()
    }

    fn store_with(entries: &[(&str, Array<f64>)]) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        for (name, arr) in entries {
            s.insert(name, Tensor::new(arr.clone(), true)).unwrap();
        }
        s
    }

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!((a - b).abs() <= tol, "{what}: {a} vs {b}");
    }

    /// Max relative gradient error between analytic and finite-difference
    /// gradients over every parameter of a store.
    fn max_rel_err(
        analytic: &ParameterStore<f64>,
        numeric: &std::collections::BTreeMap<String, Array<f64>>,
    ) -> f64 {
        let mut worst: f64 = 0.0;
        for (name, t) in analytic.iter() {
            let g = t.grad().unwrap_or_else(|| panic!("no grad for {name}"));
            let n = &numeric[name];
            for (&a, &b) in g.as_slice().iter().zip(n.as_slice()) {
                let denom = a.abs().max(b.abs()).max(1e-8);
                worst = worst.max((a - b).abs() / denom);
            }
        }
        worst
    }

    // ---- forward oracles ----

    #[test]
    fn matmul_matches_integer_oracle_exactly() {
        // Small integer-valued matrices multiply exactly in floating point,
        // so the gemm result must equal the triple loop bit for bit.
        let mut t: Tape<f32> = Tape::new();
        let a = t.constant(Array::matrix(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = t.constant(Array::matrix(3, 2, &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap());
        let y = t.matmul(a, b).unwrap();
        // Triple-loop oracle.
        let va = [[1.0f32, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let vb = [[7.0f32, 8.0], [9.0, 10.0], [11.0, 12.0]];
        let mut want = [[0.0f32; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for (k, bk) in vb.iter().enumerate() {
                    want[i][j] += va[i][k] * bk[j];
                }
            }
        }
        let got = t.value(y);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(got.at2(i, j), want[i][j]);
            }
        }
    }

    #[test]
    fn matmul_matches_triple_loop_on_random_inputs() {
        let mut r = rng(11);
        for &(m, k, n) in &[(3usize, 4usize, 5usize), (1, 7, 2), (5, 1, 3), (8, 8, 8)] {
            let va = rand_matrix(&mut r, m, k);
            let vb = rand_matrix(&mut r, k, n);
            let mut t: Tape<f64> = Tape::new();
            let a = t.constant(va.clone());
            let b = t.constant(vb.clone());
            let y = t.matmul(a, b).unwrap();
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for kk in 0..k {
                        acc += va.at2(i, kk) * vb.at2(kk, j);
                    }
                    assert_close(t.value(y).at2(i, j), acc, 1e-12, "matmul element");
                }
            }
        }
    }

    #[test]
    fn layer_norm_matches_hand_example() {
        // Row [-1, 1]: mean 0, population variance 1, so the output is
        // +/- 1/sqrt(1 + eps).
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(Array::matrix(1, 2, &[-1.0, 1.0]).unwrap());
        let g = t.constant(Array::vector(&[1.0, 1.0]).unwrap());
        let b = t.constant(Array::vector(&[0.0, 0.0]).unwrap());
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        let want = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert_close(t.value(y).at2(0, 0), -want, 1e-15, "ln[0]");
        assert_close(t.value(y).at2(0, 1), want, 1e-15, "ln[1]");
    }

    #[test]
    fn layer_norm_constant_row_outputs_beta() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(Array::matrix(2, 3, &[5.0; 6]).unwrap());
        let g = t.constant(Array::vector(&[2.0, 3.0, 4.0]).unwrap());
        let b = t.constant(Array::vector(&[0.5, -0.5, 1.5]).unwrap());
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        for i in 0..2 {
            assert_eq!(t.value(y).at2(i, 0), 0.5);
            assert_eq!(t.value(y).at2(i, 1), -0.5);
            assert_eq!(t.value(y).at2(i, 2), 1.5);
        }
    }

    /// Independent GELU oracle: x * Phi(x) with Phi computed by Simpson
    /// quadrature of the normal density — no erf implementation shared with
    /// the code under test.
    fn gelu_oracle(x: f64) -> f64 {
        let lo = -12.0f64;
        let steps = 20_000usize; // even
        let h = (x - lo) / steps as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = pdf(lo) + pdf(x);
        for i in 1..steps {
            let t = lo + i as f64 * h;
            acc += pdf(t) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        x * (acc * h / 3.0)
    }

    #[test]
    fn gelu_matches_quadrature_oracle() {
        let mut t: Tape<f64> = Tape::new();
        let xs = [-3.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 3.0];
        let x = t.constant(Array::vector(&xs).unwrap());
        let y = t.gelu(x).unwrap();
        for (i, &xi) in xs.iter().enumerate() {
            assert_close(t.value(y).as_slice()[i], gelu_oracle(xi), 1e-9, "gelu");
        }
        // Frozen spot values of the exact erf form.
        assert_eq!(t.value(y).as_slice()[3], 0.0);
        assert_close(t.value(y).as_slice()[5], 0.841_344_746_068_542_9, 1e-12, "gelu(1)");
    }

    #[test]
    fn log_sigmoid_at_zero_is_minus_ln2() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant_scalar(0.0);
        let y = t.log_sigmoid(x).unwrap();
        assert_close(t.scalar(y).unwrap(), -std::f64::consts::LN_2, 1e-15, "logsig(0)");
    }

    #[test]
    fn mean_axis_variants() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(Array::matrix(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let m0 = t.mean_axis(x, 0).unwrap();
        assert_eq!(t.value(m0).shape().dims(), &[1, 3]);
        assert_eq!(t.value(m0).as_slice(), &[2.5, 3.5, 4.5]);
        let m1 = t.mean_axis(x, 1).unwrap();
        assert_eq!(t.value(m1).shape().dims(), &[2, 1]);
        assert_eq!(t.value(m1).as_slice(), &[2.0, 5.0]);
        let v = t.constant(Array::vector(&[2.0, 4.0, 9.0]).unwrap());
        let mv = t.mean_axis(v, 0).unwrap();
        assert_eq!(t.value(mv).as_slice(), &[5.0]);
    }

    #[test]
    fn concat_and_slice_forward() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(Array::matrix(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.constant(Array::matrix(1, 2, &[5.0, 6.0]).unwrap());
        let c = t.concat_tokens(a, b).unwrap();
        assert_eq!(t.value(c).shape().dims(), &[3, 2]);
        let s = t.slice_tokens(c, 1, 3).unwrap();
        assert_eq!(t.value(s).as_slice(), &[3.0, 4.0, 5.0, 6.0]);
    }

    // ---- backward correctness ----

    #[test]
    fn quadratic_gradient_is_two_theta() {
        let mut store = store_with(&[("theta", Array::vector(&[3.0]).unwrap())]);
        let mut t: Tape<f64> = Tape::new();
        let th = t.param(&store, "theta").unwrap();
        let sq = t.mul(th, th).unwrap();
        let loss = t.sum_all(sq).unwrap();
        t.backward(loss, &mut [&mut store]).unwrap();
        assert_eq!(store.get("theta").unwrap().grad().unwrap().as_slice(), &[6.0]);
    }

    #[test]
    fn mul_by_self_doubles_gradient() {
        let mut store = store_with(&[("x", Array::vector(&[1.5, -2.0, 0.25]).unwrap())]);
        let mut t: Tape<f64> = Tape::new();
        let x = t.param(&store, "x").unwrap();
        let y = t.mul(x, x).unwrap();
        let loss = t.sum_all(y).unwrap();
        t.backward(loss, &mut [&mut store]).unwrap();
        assert_eq!(
            store.get("x").unwrap().grad().unwrap().as_slice(),
            &[3.0, -4.0, 0.5]
        );
    }

    #[test]
    fn matmul_backward_matches_finite_diff() {
        let mut r = rng(7);
        let store = store_with(&[
            ("a", rand_matrix(&mut r, 3, 4)),
            ("b", rand_matrix(&mut r, 4, 2)),
        ]);
        let f = |s: &ParameterStore<f64>| -> crate::error::Result<f64> {
            let mut t: Tape<f64> = Tape::new();
            let a = t.param(s, "a")?;
            let b = t.param(s, "b")?;
            let y = t.matmul(a, b)?;
            let sq = t.mul(y, y)?;
            let loss = t.sum_all(sq)?;
            t.scalar(loss)
        };
        let numeric = finite_diff_grad(f, &store, 1e-6).unwrap();
        let mut analytic = store.clone();
        {
            let mut t: Tape<f64> = Tape::new();
            let a = t.param(&analytic, "a").unwrap();
            let b = t.param(&analytic, "b").unwrap();
            let y = t.matmul(a, b).unwrap();
            let sq = t.mul(y, y).unwrap();
            let loss = t.sum_all(sq).unwrap();
            t.backward(loss, &mut [&mut analytic]).unwrap();
        }
        assert!(max_rel_err(&analytic, &numeric) < 1e-7);
    }

    #[test]
    fn composite_graph_backward_matches_finite_diff() {
        // Exercises matmul, add_bias, gelu, layer_norm, transpose, slice,
        // concat, mean, scale, sub, clamp and log_sigmoid in one graph.
        let mut r = rng(23);
        let store = store_with(&[
            ("w", rand_matrix(&mut r, 4, 4)),
            ("b", Array::vector(&[0.1, -0.2, 0.3, 0.05]).unwrap()),
            ("gamma", Array::vector(&[1.1, 0.9, 1.0, 1.2]).unwrap()),
            ("beta", Array::vector(&[0.0, 0.1, -0.1, 0.2]).unwrap()),
        ]);
        let x0 = {
            let mut r2 = rng(24);
            rand_matrix(&mut r2, 5, 4)
        };
        let f = |s: &ParameterStore<f64>| -> crate::error::Result<f64> {
            let mut t: Tape<f64> = Tape::new();
            let x = t.constant(x0.clone());
            let w = t.param(s, "w")?;
            let b = t.param(s, "b")?;
            let gamma = t.param(s, "gamma")?;
            let beta = t.param(s, "beta")?;
            let h = t.matmul(x, w)?;
            let h = t.add_bias(h, b)?;
            let h = t.layer_norm(h, gamma, beta, 1e-5)?;
            let h = t.gelu(h)?;
            let top = t.slice_tokens(h, 0, 2)?;
            let bottom = t.slice_tokens(h, 2, 5)?;
            let swapped = t.concat_tokens(bottom, top)?;
            let ht = t.transpose(swapped)?;
            let hc = t.clamp(ht, -0.75, 0.75)?;
            let ls = t.log_sigmoid(hc)?;
            let m = t.mean_axis(ls, 1)?;
            let d = t.sub(m, m)?; // zero, keeps sub in the graph
            let m2 = t.add(m, d)?;
            let s1 = t.sum_all(m2)?;
            let sq = t.mul(s1, s1)?;
            let loss = t.scale(sq, 0.5)?;
            t.scalar(loss)
        };
        let numeric = finite_diff_grad(f, &store, 1e-6).unwrap();
        let mut analytic = store.clone();
        {
            let mut t: Tape<f64> = Tape::new();
            let x = t.constant(x0.clone());
            let w = t.param(&analytic, "w").unwrap();
            let b = t.param(&analytic, "b").unwrap();
            let gamma = t.param(&analytic, "gamma").unwrap();
            let beta = t.param(&analytic, "beta").unwrap();
            let h = t.matmul(x, w).unwrap();
            let h = t.add_bias(h, b).unwrap();
            let h = t.layer_norm(h, gamma, beta, 1e-5).unwrap();
            let h = t.gelu(h).unwrap();
            let top = t.slice_tokens(h, 0, 2).unwrap();
            let bottom = t.slice_tokens(h, 2, 5).unwrap();
            let swapped = t.concat_tokens(bottom, top).unwrap();
            let ht = t.transpose(swapped).unwrap();
            let hc = t.clamp(ht, -0.75, 0.75).unwrap();
            let ls = t.log_sigmoid(hc).unwrap();
            let m = t.mean_axis(ls, 1).unwrap();
            let d = t.sub(m, m).unwrap();
            let m2 = t.add(m, d).unwrap();
            let s1 = t.sum_all(m2).unwrap();
            let sq = t.mul(s1, s1).unwrap();
            let loss = t.scale(sq, 0.5).unwrap();
            t.backward(loss, &mut [&mut analytic]).unwrap();
        }
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn layer_norm_backward_matches_finite_diff() {
        let mut r = rng(31);
        let store = store_with(&[
            ("x", rand_matrix(&mut r, 3, 5)),
            ("gamma", Array::vector(&[1.0, 1.3, 0.7, 1.0, 0.9]).unwrap()),
            ("beta", Array::vector(&[0.2, 0.0, -0.3, 0.1, 0.0]).unwrap()),
        ]);
        let f = |s: &ParameterStore<f64>| -> crate::error::Result<f64> {
            let mut t: Tape<f64> = Tape::new();
            let x = t.param(s, "x")?;
            let gamma = t.param(s, "gamma")?;
            let beta = t.param(s, "beta")?;
            let y = t.layer_norm(x, gamma, beta, 1e-5)?;
            let sq = t.mul(y, y)?;
            let loss = t.sum_all(sq)?;
            t.scalar(loss)
        };
        let numeric = finite_diff_grad(f, &store, 1e-6).unwrap();
        let mut analytic = store.clone();
        {
            let mut t: Tape<f64> = Tape::new();
            let x = t.param(&analytic, "x").unwrap();
            let gamma = t.param(&analytic, "gamma").unwrap();
            let beta = t.param(&analytic, "beta").unwrap();
            let y = t.layer_norm(x, gamma, beta, 1e-5).unwrap();
            let sq = t.mul(y, y).unwrap();
            let loss = t.sum_all(sq).unwrap();
            t.backward(loss, &mut [&mut analytic]).unwrap();
        }
        assert!(max_rel_err(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn gelu_and_logsigmoid_backward_match_finite_diff() {
        let store = store_with(&[("x", Array::vector(&[-2.0, -0.4, 0.0, 0.7, 2.5]).unwrap())]);
        let f = |s: &ParameterStore<f64>| -> crate::error::Result<f64> {
            let mut t: Tape<f64> = Tape::new();
            let x = t.param(s, "x")?;
            let g = t.gelu(x)?;
            let ls = t.log_sigmoid(g)?;
            let loss = t.sum_all(ls)?;
            t.scalar(loss)
        };
        let numeric = finite_diff_grad(f, &store, 1e-6).unwrap();
        let mut analytic = store.clone();
        {
            let mut t: Tape<f64> = Tape::new();
            let x = t.param(&analytic, "x").unwrap();
            let g = t.gelu(x).unwrap();
            let ls = t.log_sigmoid(g).unwrap();
            let loss = t.sum_all(ls).unwrap();
            t.backward(loss, &mut [&mut analytic]).unwrap();
        }
        assert!(max_rel_err(&analytic, &numeric) < 1e-7);
    }

    #[test]
    fn clamp_gradient_is_zero_outside_range() {
        let mut store = store_with(&[("x", Array::vector(&[-40.0, 0.0, 40.0]).unwrap())]);
        let mut t: Tape<f64> = Tape::new();
        let x = t.param(&store, "x").unwrap();
        let c = t.clamp(x, -30.0, 30.0).unwrap();
        let loss = t.sum_all(c).unwrap();
        t.backward(loss, &mut [&mut store]).unwrap();
        assert_eq!(store.get("x").unwrap().grad().unwrap().as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_scales_linearly_with_loss() {
        let build = |factor: f64| {
            let mut store = store_with(&[("w", Array::vector(&[0.3, -0.8]).unwrap())]);
            let mut t: Tape<f64> = Tape::new();
            let w = t.param(&store, "w").unwrap();
            let g = t.gelu(w).unwrap();
            let s = t.sum_all(g).unwrap();
            let loss = t.scale(s, factor).unwrap();
            t.backward(loss, &mut [&mut store]).unwrap();
            store.get("w").unwrap().grad().unwrap().clone()
        };
        let g1 = build(1.0);
        let g2 = build(2.0);
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn shared_subexpression_accumulates_gradient() {
        // loss = sum(y) + sum(y * y) with y shared: dy = 1 + 2y.
        let mut store = store_with(&[("x", Array::vector(&[0.5, -1.0]).unwrap())]);
        let mut t: Tape<f64> = Tape::new();
        let x = t.param(&store, "x").unwrap();
        let y = t.scale(x, 3.0).unwrap();
        let s1 = t.sum_all(y).unwrap();
        let yy = t.mul(y, y).unwrap();
        let s2 = t.sum_all(yy).unwrap();
        let loss = t.add(s1, s2).unwrap();
        t.backward(loss, &mut [&mut store]).unwrap();
        // d/dx = 3 * (1 + 2 * 3x)
        assert_eq!(
            store.get("x").unwrap().grad().unwrap().as_slice(),
            &[3.0 * (1.0 + 3.0), 3.0 * (1.0 - 6.0)]
        );
    }

    // ---- contract errors and modes ----

    #[test]
    fn param_nodes_are_cached_per_store_and_name() {
        let store = store_with(&[("w", Array::vector(&[1.0]).unwrap())]);
        let mut t: Tape<f64> = Tape::new();
        let a = t.param(&store, "w").unwrap();
        let b = t.param(&store, "w").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_param_name_errors() {
        let store: ParameterStore<f64> = ParameterStore::new();
        let mut t: Tape<f64> = Tape::new();
        assert!(matches!(
            t.param(&store, "missing"),
            Err(Error::UnknownParam { .. })
        ));
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let mut store = store_with(&[("w", Array::vector(&[2.0]).unwrap())]);
        let mut t: Tape<f64> = Tape::new();
        let w = t.param(&store, "w").unwrap();
        let d = t.detach(w);
        let sq = t.mul(d, d).unwrap();
        let loss = t.sum_all(sq).unwrap();
        t.backward(loss, &mut [&mut store]).unwrap();
        assert!(store.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn non_finite_output_names_the_op() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(Array::vector(&[f64::INFINITY]).unwrap());
        let b = t.constant(Array::vector(&[1.0]).unwrap());
        match t.add(a, b) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "add"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(Array::matrix(2, 3, &[0.0; 6]).unwrap());
        let b = t.constant(Array::matrix(3, 2, &[0.0; 6]).unwrap());
        assert!(matches!(t.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(t.matmul(a, a), Err(Error::ShapeMismatch { .. })));
        let v = t.constant(Array::vector(&[0.0, 0.0]).unwrap());
        assert!(matches!(t.add_bias(a, v), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(t.concat_tokens(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(t.slice_tokens(a, 1, 5).is_err());
        assert!(matches!(t.mean_axis(a, 2), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut store = store_with(&[("w", Array::vector(&[1.0, 2.0]).unwrap())]);
        let mut t: Tape<f64> = Tape::new();
        let w = t.param(&store, "w").unwrap();
        let y = t.gelu(w).unwrap();
        assert!(matches!(
            t.backward(y, &mut [&mut store]),
            Err(Error::NotScalar(_))
        ));
    }

    #[test]
    fn backward_errors_when_a_bound_store_is_missing() {
        let store = store_with(&[("w", Array::vector(&[1.0]).unwrap())]);
        let mut t: Tape<f64> = Tape::new();
        let w = t.param(&store, "w").unwrap();
        let loss = t.sum_all(w).unwrap();
        assert!(matches!(
            t.backward(loss, &mut []),
            Err(Error::MissingStore { .. })
        ));
        drop(store);
    }

    #[test]
    fn inference_tape_binds_params_as_constants() {
        let mut store = store_with(&[("w", Array::vector(&[1.5, -0.5]).unwrap())]);
        let mut train_t: Tape<f64> = Tape::new();
        let mut infer_t: Tape<f64> = Tape::new_inference();
        let wt = train_t.param(&store, "w").unwrap();
        let wi = infer_t.param(&store, "w").unwrap();
        let yt = train_t.gelu(wt).unwrap();
        let yi = infer_t.gelu(wi).unwrap();
        assert_eq!(train_t.value(yt).as_slice(), infer_t.value(yi).as_slice());
        let loss = infer_t.sum_all(yi).unwrap();
        infer_t.backward(loss, &mut [&mut store]).unwrap();
        assert!(store.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn gradients_table_exposes_input_grads() {
        let mut t: Tape<f64> = Tape::new();
        let mut store = store_with(&[("w", Array::vector(&[2.0]).unwrap())]);
        let w = t.param(&store, "w").unwrap();
        let x = t.constant(Array::vector(&[5.0]).unwrap());
        let y = t.mul(w, w).unwrap();
        let z = t.mul(y, x).unwrap();
        let loss = t.sum_all(z).unwrap();
        let grads = t.backward(loss, &mut [&mut store]).unwrap();
        assert_eq!(grads.get(y).unwrap().as_slice(), &[5.0]);
        assert!(grads.get(x).is_none(), "constants accumulate no gradient");
    }
}
