//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is an append-only arena of computed values. Operations push a
//! node and return a [`ValueId`]; [`Tape::backward`] walks the nodes in
//! reverse and produces a gradient for every `requires_grad` leaf. A tape is
//! consumed by exactly one backward pass; call [`Tape::reset`] to reuse the
//! allocation.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_zip, kernels, reduce_to_suffix, suffix_broadcastable, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Debug, Clone, Copy)]
struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, f64),
    AddScalar(ValueId),
    Matmul {
        a: ValueId,
        b: ValueId,
        dims: MatDims,
    },
    MatmulTransB {
        a: ValueId,
        b: ValueId,
        dims: MatDims,
    },
    Sigmoid(ValueId),
    Relu(ValueId),
    Softmax {
        x: ValueId,
        axis: usize,
    },
    LayerNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    },
    MeanAxis {
        x: ValueId,
        axis: usize,
    },
    MeanAll(ValueId),
    SumAll(ValueId),
    BroadcastTo(ValueId),
    Permute {
        x: ValueId,
        axes: Vec<usize>,
    },
    Reshape(ValueId),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients for the `requires_grad` leaves of one backward pass.
/// Unreachable leaves hold zeros of the leaf shape.
pub struct Gradients {
    map: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.map.get(&id.0)
    }

    pub fn take(&mut self, id: ValueId) -> Option<Tensor> {
        self.map.remove(&id.0)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all recorded nodes and allow recording again.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Sign pattern of every ReLU input on the tape, in recording order.
    /// Two evaluations of the same graph sit on the same smooth piece of
    /// the loss exactly when their patterns are equal.
    pub fn relu_activation_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(input) = node.op {
                pattern.extend(self.nodes[input.0].value.data().iter().map(|&v| v > 0.0));
            }
        }
        pattern
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> ValueId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> ValueId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.leaf(value, false)
    }

    // ── elementwise ──────────────────────────────────────────────────────

    fn binary(
        &mut self,
        a: ValueId,
        b: ValueId,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        swap_args: impl Fn(f64, f64) -> f64,
        make: impl Fn(ValueId, ValueId) -> Op,
    ) -> Result<ValueId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = if av.shape() == bv.shape() {
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else if suffix_broadcastable(bv.shape(), av.shape()) {
            broadcast_zip(av, bv, op_name, &f)?
        } else if suffix_broadcastable(av.shape(), bv.shape()) {
            broadcast_zip(bv, av, op_name, &swap_args)?
        } else {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        };
        let shape = if av.numel() >= bv.numel() {
            av.shape().to_vec()
        } else {
            bv.shape().to_vec()
        };
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, make(a, b), needs))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(a, b, "add", |x, y| x + y, |x, y| y + x, Op::Add)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(a, b, "sub", |x, y| x - y, |x, y| y - x, Op::Sub)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(a, b, "mul", |x, y| x * y, |x, y| y * x, Op::Mul)
    }

    pub fn scale(&mut self, a: ValueId, factor: f64) -> ValueId {
        let v = &self.nodes[a.0].value;
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * factor).collect())
            .expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, factor), needs)
    }

    pub fn add_scalar(&mut self, a: ValueId, c: f64) -> ValueId {
        let v = &self.nodes[a.0].value;
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x + c).collect())
            .expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::AddScalar(a), needs)
    }

    /// 1 - x, elementwise.
    pub fn one_minus(&mut self, a: ValueId) -> ValueId {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let v = &self.nodes[a.0].value;
        let value = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        )
        .expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Relu(a), needs)
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        let v = &self.nodes[a.0].value;
        let value = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| stable_sigmoid(x)).collect(),
        )
        .expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Sigmoid(a), needs)
    }

    // ── matrix products ──────────────────────────────────────────────────

    fn mat_dims(
        a_shape: &[usize],
        b_shape: &[usize],
        b_rows_are_cols: bool,
        op: &'static str,
    ) -> Result<(MatDims, Vec<usize>)> {
        let mismatch = || Error::ShapeMismatch {
            op,
            lhs: a_shape.to_vec(),
            rhs: b_shape.to_vec(),
        };
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(mismatch());
        }
        let m = a_shape[a_shape.len() - 2];
        let k = a_shape[a_shape.len() - 1];
        // For NN b is [k,n]; for NT b is [n,k].
        let (b_contract, n) = if b_rows_are_cols {
            (b_shape[b_shape.len() - 1], b_shape[b_shape.len() - 2])
        } else {
            (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1])
        };
        if b_contract != k {
            return Err(mismatch());
        }
        let lead = &a_shape[..a_shape.len() - 2];
        let b_batched = b_shape.len() > 2;
        if b_batched && &b_shape[..b_shape.len() - 2] != lead {
            return Err(mismatch());
        }
        let batch: usize = lead.iter().product::<usize>().max(1);
        let mut out_shape = lead.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        Ok((
            MatDims {
                batch,
                m,
                k,
                n,
                b_batched,
            },
            out_shape,
        ))
    }

    /// Matrix product `a @ b`; `a` is `[.., m, k]`, `b` is `[k, n]` shared or
    /// `[.., k, n]` with matching leading extents.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (dims, out_shape) = Self::mat_dims(av.shape(), bv.shape(), false, "matmul")?;
        let data = kernels::matmul_nn(
            av.data(),
            bv.data(),
            dims.batch,
            dims.m,
            dims.k,
            dims.n,
            dims.b_batched,
        );
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Matmul { a, b, dims }, needs))
    }

    /// `a @ b^T`; `a` is `[.., m, k]`, `b` is `[n, k]` shared or `[.., n, k]`.
    pub fn matmul_trans_b(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (dims, out_shape) = Self::mat_dims(av.shape(), bv.shape(), true, "matmul_trans_b")?;
        let data = kernels::matmul_nt(
            av.data(),
            bv.data(),
            dims.batch,
            dims.m,
            dims.k,
            dims.n,
            dims.b_batched,
        );
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::MatmulTransB { a, b, dims }, needs))
    }

    // ── normalization and reductions ─────────────────────────────────────

    /// Shift-invariant softmax along `axis` (max is subtracted before exp).
    pub fn softmax(&mut self, a: ValueId, axis: usize) -> Result<ValueId> {
        let v = &self.nodes[a.0].value;
        let (outer, extent, inner) = lane_dims(v.shape(), axis)?;
        let mut data = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * extent + e) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for e in 0..extent {
                    max = max.max(data[at(e)]);
                }
                let mut sum = 0.0;
                for e in 0..extent {
                    let ex = (data[at(e)] - max).exp();
                    data[at(e)] = ex;
                    sum += ex;
                }
                for e in 0..extent {
                    data[at(e)] /= sum;
                }
            }
        }
        let needs = self.needs(a);
        let value = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax { x: a, axis }, needs))
    }

    /// Per-lane normalization over the last axis:
    /// `(x - mean)/sqrt(var + eps) * gamma + beta`.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        let xv = &self.nodes[x.0].value;
        let d = *xv.shape().last().expect("layer_norm needs >= 1 axis");
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let mut data = Vec::with_capacity(xv.numel());
        for lane in xv.data().chunks(d) {
            let (mean, inv_std) = lane_stats(lane, eps);
            for (j, &v) in lane.iter().enumerate() {
                data.push((v - mean) * inv_std * gv.data()[j] + bv.data()[j]);
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, eps }, needs))
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: ValueId, axis: usize) -> Result<ValueId> {
        let v = &self.nodes[a.0].value;
        let (outer, extent, inner) = lane_dims(v.shape(), axis)?;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                for i in 0..inner {
                    data[o * inner + i] += v.data()[(o * extent + e) * inner + i];
                }
            }
        }
        let inv = 1.0 / extent as f64;
        for d in &mut data {
            *d *= inv;
        }
        let mut shape: Vec<usize> = v.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let needs = self.needs(a);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::MeanAxis { x: a, axis }, needs))
    }

    pub fn mean_all(&mut self, a: ValueId) -> ValueId {
        let v = &self.nodes[a.0].value;
        let sum: f64 = v.data().iter().sum();
        let needs = self.needs(a);
        let value = Tensor::scalar(sum / v.numel() as f64);
        self.push(value, Op::MeanAll(a), needs)
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let v = &self.nodes[a.0].value;
        let sum: f64 = v.data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(sum), Op::SumAll(a), needs)
    }

    // ── shape manipulation ───────────────────────────────────────────────

    /// Expand by suffix broadcast, e.g. `[N,D]` to `[B,N,D]`.
    pub fn broadcast_to(&mut self, a: ValueId, shape: &[usize]) -> Result<ValueId> {
        let v = &self.nodes[a.0].value;
        if !suffix_broadcastable(v.shape(), shape) {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let n: usize = shape.iter().product();
        let cycle = v.numel();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            data.extend_from_slice(v.data());
        }
        debug_assert_eq!(data.len() % cycle, 0);
        let needs = self.needs(a);
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(value, Op::BroadcastTo(a), needs))
    }

    pub fn reshape(&mut self, a: ValueId, shape: &[usize]) -> Result<ValueId> {
        let v = self.nodes[a.0].value.reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(v, Op::Reshape(a), needs))
    }

    pub fn permute(&mut self, a: ValueId, axes: &[usize]) -> Result<ValueId> {
        let v = &self.nodes[a.0].value;
        let ndim = v.ndim();
        let mut seen = vec![false; ndim];
        if axes.len() != ndim || axes.iter().any(|&ax| ax >= ndim || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::InvalidShape {
                op: "permute",
                shape: v.shape().to_vec(),
                reason: format!("axes {axes:?} is not a permutation"),
            });
        }
        let (data, shape) = permute_data(v.data(), v.shape(), axes);
        let needs = self.needs(a);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                x: a,
                axes: axes.to_vec(),
            },
            needs,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse pass from a scalar `loss`. Consumes the tape. Every
    /// `requires_grad` leaf gets an entry; unreachable leaves get zeros.
    pub fn backward(&mut self, loss: ValueId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_val = &self.nodes[loss.0].value;
        if loss_val.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_val.shape().to_vec(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            // Re-stash for leaves; interior gradients are consumed here.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    self.accumulate_elementwise(&mut grads, a, &g, None);
                    self.accumulate_elementwise(&mut grads, b, &g, None);
                }
                Op::Sub(a, b) => {
                    self.accumulate_elementwise(&mut grads, a, &g, None);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate_elementwise(&mut grads, b, &neg, None);
                }
                Op::Mul(a, b) => {
                    // d/da = g * b, d/db = g * a, each reduced to its shape.
                    if self.needs(a) {
                        let with_b = self.mul_broadcast_value(&g, id, b)?;
                        self.accumulate_elementwise(&mut grads, a, &with_b, None);
                    }
                    if self.needs(b) {
                        let with_a = self.mul_broadcast_value(&g, id, a)?;
                        self.accumulate_elementwise(&mut grads, b, &with_a, None);
                    }
                }
                Op::Scale(a, factor) => {
                    let scaled: Vec<f64> = g.iter().map(|v| v * factor).collect();
                    self.accumulate_elementwise(&mut grads, a, &scaled, None);
                }
                Op::AddScalar(a) => {
                    self.accumulate_elementwise(&mut grads, a, &g, None);
                }
                Op::Matmul { a, b, dims } => {
                    if self.needs(a) {
                        let da = kernels::matmul_nt(
                            &g,
                            self.nodes[b.0].value.data(),
                            dims.batch,
                            dims.m,
                            dims.n,
                            dims.k,
                            dims.b_batched,
                        );
                        self.accumulate_raw(&mut grads, a, da);
                    }
                    if self.needs(b) {
                        let db = kernels::matmul_tn(
                            self.nodes[a.0].value.data(),
                            &g,
                            dims.batch,
                            dims.m,
                            dims.k,
                            dims.n,
                            !dims.b_batched,
                        );
                        self.accumulate_raw(&mut grads, b, db);
                    }
                }
                Op::MatmulTransB { a, b, dims } => {
                    if self.needs(a) {
                        let da = kernels::matmul_nn(
                            &g,
                            self.nodes[b.0].value.data(),
                            dims.batch,
                            dims.m,
                            dims.n,
                            dims.k,
                            dims.b_batched,
                        );
                        self.accumulate_raw(&mut grads, a, da);
                    }
                    if self.needs(b) {
                        let db = kernels::matmul_tn(
                            &g,
                            self.nodes[a.0].value.data(),
                            dims.batch,
                            dims.m,
                            dims.n,
                            dims.k,
                            !dims.b_batched,
                        );
                        self.accumulate_raw(&mut grads, b, db);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = self.nodes[id].value.data();
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                        .collect();
                    self.accumulate_raw(&mut grads, a, dx);
                }
                Op::Relu(a) => {
                    let x = self.nodes[a.0].value.data();
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    self.accumulate_raw(&mut grads, a, dx);
                }
                Op::Softmax { x, axis } => {
                    let y = self.nodes[id].value.data();
                    let shape = self.nodes[id].value.shape();
                    let (outer, extent, inner) = lane_dims(shape, axis)?;
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |e: usize| (o * extent + e) * inner + i;
                            let mut dot = 0.0;
                            for e in 0..extent {
                                dot += g[at(e)] * y[at(e)];
                            }
                            for e in 0..extent {
                                dx[at(e)] = y[at(e)] * (g[at(e)] - dot);
                            }
                        }
                    }
                    self.accumulate_raw(&mut grads, x, dx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = self.nodes[x.0].value.data();
                    let d = *self.nodes[x.0].value.shape().last().unwrap();
                    let gam = self.nodes[gamma.0].value.data();
                    let mut dx = vec![0.0; xv.len()];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for (lane_idx, lane) in xv.chunks(d).enumerate() {
                        let off = lane_idx * d;
                        let (mean, inv_std) = lane_stats(lane, eps);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let xh = (lane[j] - mean) * inv_std;
                            let gj = g[off + j];
                            dgamma[j] += gj * xh;
                            dbeta[j] += gj;
                            let dz = gj * gam[j];
                            m1 += dz;
                            m2 += dz * xh;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let xh = (lane[j] - mean) * inv_std;
                            let dz = g[off + j] * gam[j];
                            dx[off + j] = (dz - m1 - xh * m2) * inv_std;
                        }
                    }
                    self.accumulate_raw(&mut grads, x, dx);
                    if self.needs(gamma) {
                        self.accumulate_raw(&mut grads, gamma, dgamma);
                    }
                    if self.needs(beta) {
                        self.accumulate_raw(&mut grads, beta, dbeta);
                    }
                }
                Op::MeanAxis { x, axis } => {
                    let shape = self.nodes[x.0].value.shape();
                    let (outer, extent, inner) = lane_dims(shape, axis)?;
                    let inv = 1.0 / extent as f64;
                    let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                    for o in 0..outer {
                        for e in 0..extent {
                            for i in 0..inner {
                                dx[(o * extent + e) * inner + i] = g[o * inner + i] * inv;
                            }
                        }
                    }
                    self.accumulate_raw(&mut grads, x, dx);
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[a.0].value.numel();
                    let gv = g[0] / n as f64;
                    self.accumulate_raw(&mut grads, a, vec![gv; n]);
                }
                Op::SumAll(a) => {
                    let n = self.nodes[a.0].value.numel();
                    self.accumulate_raw(&mut grads, a, vec![g[0]; n]);
                }
                Op::BroadcastTo(a) => {
                    let small = self.nodes[a.0].value.numel();
                    let reduced = reduce_to_suffix(&g, small);
                    self.accumulate_raw(&mut grads, a, reduced);
                }
                Op::Permute { x, axes } => {
                    let inv = inverse_permutation(&axes);
                    let (data, _) = permute_data(&g, self.nodes[id].value.shape(), &inv);
                    self.accumulate_raw(&mut grads, x, data);
                }
                Op::Reshape(a) => {
                    self.accumulate_raw(&mut grads, a, g);
                }
            }
        }

        let mut map = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let grad = match grads[idx].take() {
                    Some(data) => Tensor::new(node.value.shape().to_vec(), data)?,
                    None => Tensor::zeros(node.value.shape()),
                };
                map.insert(idx, grad);
            }
        }
        Ok(Gradients { map })
    }

    /// g (shaped like node `out`) times the value of `operand`, broadcasting
    /// the smaller of the two.
    fn mul_broadcast_value(&self, g: &[f64], out: usize, operand: ValueId) -> Result<Vec<f64>> {
        let out_shape = self.nodes[out].value.shape();
        let ov = &self.nodes[operand.0].value;
        if ov.shape() == out_shape {
            Ok(g.iter().zip(ov.data()).map(|(&a, &b)| a * b).collect())
        } else {
            // operand is the smaller, cycled side
            let cycle = ov.numel();
            Ok(g.iter()
                .enumerate()
                .map(|(i, &gv)| gv * ov.data()[i % cycle])
                .collect())
        }
    }

    /// Accumulate a gradient contribution `g` (shaped like the *output* of the
    /// consuming op) into `target`, reducing over broadcast dims if needed.
    fn accumulate_elementwise(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: ValueId,
        g: &[f64],
        _reserved: Option<()>,
    ) {
        if !self.needs(target) {
            return;
        }
        let tn = self.nodes[target.0].value.numel();
        let contribution = if tn == g.len() {
            g.to_vec()
        } else {
            reduce_to_suffix(g, tn)
        };
        self.accumulate_raw_slice(grads, target, &contribution);
    }

    fn accumulate_raw(&self, grads: &mut [Option<Vec<f64>>], target: ValueId, data: Vec<f64>) {
        if !self.needs(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(data) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(data),
        }
    }

    fn accumulate_raw_slice(&self, grads: &mut [Option<Vec<f64>>], target: ValueId, data: &[f64]) {
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, &v) in existing.iter_mut().zip(data) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(data.to_vec()),
        }
    }
}

/// Numerically stable logistic function (no overflow for large |x|). The
/// result is pinned strictly inside (0,1): deep saturation would otherwise
/// round to exactly 0 or 1 in double precision.
pub fn stable_sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - 0.5 * f64::EPSILON)
}

fn lane_stats(lane: &[f64], eps: f64) -> (f64, f64) {
    let n = lane.len() as f64;
    let mean = lane.iter().sum::<f64>() / n;
    let var = lane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn lane_dims(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let ndim = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; ndim];
    for d in (0..ndim.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    // stride in the input for each output axis
    let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![0.0; data.len()];
    let mut coords = vec![0usize; ndim];
    let mut in_idx = 0usize;
    for slot in out.iter_mut() {
        *slot = data[in_idx];
        // odometer increment over out_shape
        for d in (0..ndim).rev() {
            coords[d] += 1;
            in_idx += gather[d];
            if coords[d] < out_shape[d] {
                break;
            }
            in_idx -= gather[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    (out, out_shape)
}
