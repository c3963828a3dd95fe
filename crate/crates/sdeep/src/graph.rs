//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its result,
//! inputs are referenced by [`NodeId`], and [`Graph::backward`] replays the
//! tape in reverse, accumulating vector-Jacobian products. The graph is
//! rebuilt from scratch for every training step — nothing is cached across
//! steps, which keeps the engine simple and bit-reproducible.
//!
//! Forward evaluation is pure: the same inputs always produce bit-identical
//! outputs. Gradients flow only into nodes marked `requires_grad`; everything
//! else is skipped during the reverse sweep.

use crate::tensor::{numel_of, Tensor, TensorError};

/// Handle to a node of a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Temporal padding mode for the 1-d convolution primitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so the output keeps the input length (odd kernels, stride 1).
    Same,
    /// No padding; the kernel must fit inside the input.
    Valid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Reshape(NodeId),
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
        stop: usize,
    },
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Conv1d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: Padding,
    },
    /// Mean of `-ln(max(p[row, label], 1e-12))` over rows of a probability
    /// matrix. Fused because the op catalogue has no log/gather to compose it.
    NllFromProbs {
        probs: NodeId,
        labels: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Probability floor used by [`Graph::nll_from_probs`] before taking the log.
pub const PROB_CLAMP: f64 = 1e-12;

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Smallest `|x|` fed into any relu in the graph; infinity when no relu
    /// was recorded.
    ///
    /// Finite-difference checks use this to reject evaluation points on (or
    /// within a step of) the relu kink: there the backward pass legitimately
    /// picks the zero subgradient while a central difference measures the
    /// two-sided slope average, and the two disagree by construction. Exact
    /// zeros do reach relu in practice — zero-initialized biases, padded
    /// positions, and upstream relu outputs are all exactly zero.
    pub fn relu_input_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Relu(input) = node.op {
                for &x in self.nodes[input.0].value.data() {
                    margin = margin.min(x.abs());
                }
            }
        }
        margin
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a graph input. Its `requires_grad` flag decides
    /// whether backward will deposit a gradient for it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Value of a node. Panics on a foreign/invalid id.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of a node after [`Graph::backward`], if it requires grad.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    fn push(&mut self, op: Op, mut value: Tensor) -> NodeId {
        // A node's gradient buffer exists exactly when it participates in
        // differentiation; `set_requires_grad` keeps that invariant.
        let requires = value.requires_grad();
        value.set_requires_grad(requires);
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, op: &'static str, id: NodeId) -> Result<(), TensorError> {
        if id.0 >= self.nodes.len() {
            return Err(TensorError::UnknownNode { op, id: id.0 });
        }
        Ok(())
    }

    fn any_requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].value.requires_grad())
    }

    // ── Elementwise binary ops (right-aligned broadcasting) ─────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_elementwise("add", a, b, |x, y| x + y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_elementwise("mul", a, b, |x, y| x * y)
    }

    fn binary_elementwise(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, TensorError> {
        self.check(op, a)?;
        self.check(op, b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shapes(op, ta.shape(), tb.shape())?;
        let mut out = vec![0.0; numel_of(&out_shape)];
        if ta.shape() == tb.shape() {
            for (o, (x, y)) in out.iter_mut().zip(ta.data().iter().zip(tb.data())) {
                *o = f(*x, *y);
            }
        } else {
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&out_shape, ta.shape(), tb.shape(), |i, ia, ib| {
                out[i] = f(da[ia], db[ib]);
            });
        }
        let mut t = Tensor::new(out, &out_shape)?;
        t.set_requires_grad(self.any_requires(&[a, b]));
        let node_op = if op == "add" { Op::Add(a, b) } else { Op::Mul(a, b) };
        Ok(self.push(node_op, t))
    }

    // ── Matrix multiply ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check("matmul", a)?;
        self.check("matmul", b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                details: format!("cannot multiply {sa:?} by {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let mut t = Tensor::new(out, &[m, n])?;
        t.set_requires_grad(self.any_requires(&[a, b]));
        Ok(self.push(Op::MatMul(a, b), t))
    }

    // ── Structural ops ───────────────────────────────────────────────────────

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                details: "needs at least one input".into(),
            });
        }
        for &id in inputs {
            self.check("concat", id)?;
        }
        let first_shape = self.nodes[inputs[0].0].value.shape().to_vec();
        let rank = first_shape.len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank,
            });
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.nodes[id.0].value.shape();
            let compatible = s.len() == rank
                && s.iter()
                    .zip(&first_shape)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    details: format!(
                        "input shape {s:?} incompatible with {first_shape:?} along axis {axis}"
                    ),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first_shape.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first_shape[..axis].iter().product();
        let inner: usize = first_shape[axis + 1..].iter().product();
        let mut out = vec![0.0; numel_of(&out_shape)];
        let out_row = axis_total * inner;
        let mut offset = 0;
        for &id in inputs {
            let t = &self.nodes[id.0].value;
            let block = t.shape()[axis] * inner;
            for o in 0..outer {
                let src = &t.data()[o * block..(o + 1) * block];
                out[o * out_row + offset..o * out_row + offset + block].copy_from_slice(src);
            }
            offset += block;
        }
        let mut t = Tensor::new(out, &out_shape)?;
        t.set_requires_grad(self.any_requires(inputs));
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            t,
        ))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        self.check("reshape", input)?;
        let t = &self.nodes[input.0].value;
        if numel_of(shape) != t.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                details: format!(
                    "cannot view {:?} ({} elements) as {shape:?} ({} elements)",
                    t.shape(),
                    t.numel(),
                    numel_of(shape)
                ),
            });
        }
        let mut out = t.reshaped(shape)?;
        out.set_requires_grad(t.requires_grad());
        Ok(self.push(Op::Reshape(input), out))
    }

    pub fn slice(
        &mut self,
        input: NodeId,
        axis: usize,
        start: usize,
        stop: usize,
    ) -> Result<NodeId, TensorError> {
        self.check("slice", input)?;
        let t = &self.nodes[input.0].value;
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if start >= stop || stop > shape[axis] {
            return Err(TensorError::ShapeMismatch {
                op: "slice",
                details: format!(
                    "range {start}..{stop} invalid for axis {axis} of extent {}",
                    shape[axis]
                ),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = stop - start;
        let width = (stop - start) * inner;
        let src_row = shape[axis] * inner;
        let mut out = vec![0.0; outer * width];
        for o in 0..outer {
            let src = &t.data()[o * src_row + start * inner..o * src_row + stop * inner];
            out[o * width..(o + 1) * width].copy_from_slice(src);
        }
        let mut tensor = Tensor::new(out, &out_shape)?;
        tensor.set_requires_grad(t.requires_grad());
        Ok(self.push(
            Op::Slice {
                input,
                axis,
                start,
                stop,
            },
            tensor,
        ))
    }

    // ── Pointwise nonlinearities ─────────────────────────────────────────────

    pub fn tanh(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        self.unary("tanh", input, |x| x.tanh())
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        self.unary("sigmoid", input, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        // NaN is propagated, not zeroed: `f64::max`-style NaN swallowing
        // would let an overflowed activation masquerade as a dead unit and
        // hide divergence from the training loop.
        self.unary("relu", input, |x| if x > 0.0 || x.is_nan() { x } else { 0.0 })
    }

    fn unary(
        &mut self,
        op: &'static str,
        input: NodeId,
        f: impl Fn(f64) -> f64,
    ) -> Result<NodeId, TensorError> {
        self.check(op, input)?;
        let t = &self.nodes[input.0].value;
        let out: Vec<f64> = t.data().iter().map(|&x| f(x)).collect();
        let mut tensor = Tensor::new(out, t.shape())?;
        tensor.set_requires_grad(t.requires_grad());
        let node_op = match op {
            "tanh" => Op::Tanh(input),
            "sigmoid" => Op::Sigmoid(input),
            _ => Op::Relu(input),
        };
        Ok(self.push(node_op, tensor))
    }

    /// Softmax over the last axis, with max subtraction for stability.
    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        self.check("softmax", input)?;
        let t = &self.nodes[input.0].value;
        let shape = t.shape();
        if shape.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax",
                details: "needs rank >= 1".into(),
            });
        }
        let row = *shape.last().unwrap();
        if row == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax",
                details: "last axis has extent 0".into(),
            });
        }
        let mut out = vec![0.0; t.numel()];
        for (o, x) in out.chunks_exact_mut(row).zip(t.data().chunks_exact(row)) {
            let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (oi, xi) in o.iter_mut().zip(x) {
                *oi = (xi - max).exp();
                sum += *oi;
            }
            for oi in o.iter_mut() {
                *oi /= sum;
            }
        }
        let mut tensor = Tensor::new(out, shape)?;
        tensor.set_requires_grad(t.requires_grad());
        Ok(self.push(Op::Softmax(input), tensor))
    }

    // ── Reductions ───────────────────────────────────────────────────────────

    /// Sum of all elements, producing a rank-0 scalar.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        self.check("sum", input)?;
        let t = &self.nodes[input.0].value;
        let total: f64 = t.data().iter().sum();
        let mut tensor = Tensor::scalar(total);
        tensor.set_requires_grad(t.requires_grad());
        Ok(self.push(Op::Sum(input), tensor))
    }

    /// Mean of all elements, producing a rank-0 scalar.
    pub fn mean(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        self.check("mean", input)?;
        let t = &self.nodes[input.0].value;
        if t.numel() == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "mean",
                details: "cannot average zero elements".into(),
            });
        }
        let total: f64 = t.data().iter().sum();
        let mut tensor = Tensor::scalar(total / t.numel() as f64);
        tensor.set_requires_grad(t.requires_grad());
        Ok(self.push(Op::Mean(input), tensor))
    }

    // ── Temporal convolution ─────────────────────────────────────────────────

    /// 1-d convolution over the last (time) axis.
    ///
    /// `input` is `(n, f_in, t)`, `weight` is `(f_out, f_in, k)`, `bias` is
    /// `(f_out)`; the result is `(n, f_out, t_out)`.
    pub fn conv1d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId, TensorError> {
        self.check("conv1d", input)?;
        self.check("conv1d", weight)?;
        self.check("conv1d", bias)?;
        let (tx, tw, tb) = (
            &self.nodes[input.0].value,
            &self.nodes[weight.0].value,
            &self.nodes[bias.0].value,
        );
        let (sx, sw, sb) = (tx.shape(), tw.shape(), tb.shape());
        if sx.len() != 3 || sw.len() != 3 || sb.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                details: format!(
                    "expected input (n, f_in, t), weight (f_out, f_in, k), bias (f_out); \
                     got {sx:?}, {sw:?}, {sb:?}"
                ),
            });
        }
        let (n, f_in, t_in) = (sx[0], sx[1], sx[2]);
        let (f_out, k) = (sw[0], sw[2]);
        if sw[1] != f_in || sb[0] != f_out {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                details: format!(
                    "weight {sw:?} / bias {sb:?} do not match input {sx:?} (f_in {f_in})"
                ),
            });
        }
        if stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                details: "stride must be >= 1".into(),
            });
        }
        let t_out = match padding {
            Padding::Same => {
                if k % 2 == 0 {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv1d",
                        details: format!("same padding requires an odd kernel, got k={k}"),
                    });
                }
                if stride != 1 {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv1d",
                        details: format!("same padding requires stride 1, got {stride}"),
                    });
                }
                t_in
            }
            Padding::Valid => {
                if t_in < k {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv1d",
                        details: format!("kernel k={k} longer than input t={t_in} (valid padding)"),
                    });
                }
                (t_in - k) / stride + 1
            }
        };
        let out = conv1d_forward(
            tx.data(),
            tw.data(),
            tb.data(),
            n,
            f_in,
            t_in,
            f_out,
            k,
            stride,
            padding,
            t_out,
        );
        let mut tensor = Tensor::new(out, &[n, f_out, t_out])?;
        tensor.set_requires_grad(self.any_requires(&[input, weight, bias]));
        Ok(self.push(
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            tensor,
        ))
    }

    // ── Classification loss head ─────────────────────────────────────────────

    /// Mean negative log-likelihood of the labelled entries of a probability
    /// matrix `(n, classes)`, with probabilities floored at [`PROB_CLAMP`].
    pub fn nll_from_probs(
        &mut self,
        probs: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TensorError> {
        self.check("nll_from_probs", probs)?;
        let t = &self.nodes[probs.0].value;
        let shape = t.shape();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "nll_from_probs",
                details: format!("expected (n, classes), got {shape:?}"),
            });
        }
        let (n, classes) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "nll_from_probs",
                details: format!("{} labels for {n} rows", labels.len()),
            });
        }
        if n == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "nll_from_probs",
                details: "empty batch".into(),
            });
        }
        let mut total = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(TensorError::LabelOutOfRange {
                    label,
                    classes,
                    row,
                });
            }
            // The clamp floors vanishing probabilities but must not swallow
            // NaN (`f64::max(NaN, c)` returns `c`): a poisoned probability
            // has to surface as a non-finite loss.
            let raw = t.data()[row * classes + label];
            let p = if raw.is_nan() { raw } else { raw.max(PROB_CLAMP) };
            total += -p.ln();
        }
        let mut tensor = Tensor::scalar(total / n as f64);
        tensor.set_requires_grad(t.requires_grad());
        Ok(self.push(
            Op::NllFromProbs {
                probs,
                labels: labels.to_vec(),
            },
            tensor,
        ))
    }

    // ── Reverse sweep ────────────────────────────────────────────────────────

    /// Runs reverse-mode differentiation from a scalar loss node.
    ///
    /// Afterwards every `requires_grad` node at or before `loss` holds
    /// `d loss / d node` in its gradient buffer; parameters the loss does not
    /// depend on get exact zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        self.check("backward", loss)?;
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }

        // Accumulate into scratch buffers first; node gradient slots are
        // written at the end so partially accumulated values never leak out.
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].value.requires_grad() {
            grads[loss.0] = Some(vec![1.0]);
        }

        for id in (0..=loss.0).rev() {
            let seed = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_op(id, &seed, &mut grads);
            grads[id] = Some(seed);
        }

        for id in 0..=loss.0 {
            let numel = self.nodes[id].value.numel();
            if self.nodes[id].value.requires_grad() {
                let g = grads[id].take().unwrap_or_else(|| vec![0.0; numel]);
                if let Some(slot) = self.nodes[id].value.grad_mut() {
                    slot.copy_from_slice(&g);
                }
            }
        }
        Ok(())
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad()
    }

    /// Adds the vector-Jacobian product of node `id` (seeded with `seed`)
    /// into the scratch gradients of its inputs.
    fn accumulate_op(&self, id: usize, seed: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for operand in [a, b] {
                    if !self.requires(operand) {
                        continue;
                    }
                    let t = &self.nodes[operand.0].value;
                    let g = ensure(grads, operand.0, t.numel());
                    let out_shape = self.nodes[id].value.shape();
                    if t.shape() == out_shape {
                        for (gi, si) in g.iter_mut().zip(seed) {
                            *gi += si;
                        }
                    } else {
                        for_each_broadcast_single(out_shape, t.shape(), |i, io| {
                            g[io] += seed[i];
                        });
                    }
                }
            }
            Op::Mul(a, b) => {
                let out_shape = self.nodes[id].value.shape().to_vec();
                for (operand, other) in [(a, b), (b, a)] {
                    if !self.requires(operand) {
                        continue;
                    }
                    let t_op = &self.nodes[operand.0].value;
                    let t_other = &self.nodes[other.0].value;
                    let other_data = t_other.data();
                    let g = ensure(grads, operand.0, t_op.numel());
                    if t_op.shape() == out_shape.as_slice() && t_other.shape() == out_shape.as_slice() {
                        for ((gi, si), oi) in g.iter_mut().zip(seed).zip(other_data) {
                            *gi += si * oi;
                        }
                    } else {
                        for_each_broadcast(&out_shape, t_op.shape(), t_other.shape(), |i, io, ix| {
                            g[io] += seed[i] * other_data[ix];
                        });
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (
                    self.nodes[a.0].value.shape().to_vec(),
                    self.nodes[b.0].value.shape().to_vec(),
                );
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires(a) {
                    // dA = seed . B^T  -> dA[i][p] = sum_j seed[i][j] * B[p][j]
                    let b_data = self.nodes[b.0].value.data();
                    let g = ensure(grads, a.0, m * k);
                    for i in 0..m {
                        let seed_row = &seed[i * n..(i + 1) * n];
                        let g_row = &mut g[i * k..(i + 1) * k];
                        for (p, gp) in g_row.iter_mut().enumerate() {
                            let b_row = &b_data[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for (sj, bj) in seed_row.iter().zip(b_row) {
                                acc += sj * bj;
                            }
                            *gp += acc;
                        }
                    }
                }
                if self.requires(b) {
                    // dB = A^T . seed -> dB[p][j] += A[i][p] * seed[i][j]
                    let a_data = self.nodes[a.0].value.data();
                    let g = ensure(grads, b.0, k * n);
                    for i in 0..m {
                        let seed_row = &seed[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = a_data[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let g_row = &mut g[p * n..(p + 1) * n];
                            for (gj, sj) in g_row.iter_mut().zip(seed_row) {
                                *gj += aip * sj;
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[id].value.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let out_row = out_shape[axis] * inner;
                let mut offset = 0;
                for input in inputs {
                    let t = &self.nodes[input.0].value;
                    let block = t.shape()[axis] * inner;
                    if self.requires(input) {
                        let numel = t.numel();
                        let g = ensure(grads, input.0, numel);
                        for o in 0..outer {
                            let src = &seed[o * out_row + offset..o * out_row + offset + block];
                            for (gi, si) in g[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *gi += si;
                            }
                        }
                    }
                    offset += block;
                }
            }
            Op::Reshape(input) => {
                if self.requires(input) {
                    let numel = self.nodes[input.0].value.numel();
                    let g = ensure(grads, input.0, numel);
                    for (gi, si) in g.iter_mut().zip(seed) {
                        *gi += si;
                    }
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                stop,
            } => {
                if self.requires(input) {
                    let shape = self.nodes[input.0].value.shape().to_vec();
                    let outer: usize = shape[..axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let src_row = shape[axis] * inner;
                    let width = (stop - start) * inner;
                    let numel = self.nodes[input.0].value.numel();
                    let g = ensure(grads, input.0, numel);
                    for o in 0..outer {
                        let dst = &mut g[o * src_row + start * inner..o * src_row + stop * inner];
                        for (gi, si) in dst.iter_mut().zip(&seed[o * width..(o + 1) * width]) {
                            *gi += si;
                        }
                    }
                }
            }
            Op::Tanh(input) => {
                if self.requires(input) {
                    let y = self.nodes[id].value.data();
                    let g = ensure(grads, input.0, y.len());
                    for ((gi, si), yi) in g.iter_mut().zip(seed).zip(y) {
                        *gi += si * (1.0 - yi * yi);
                    }
                }
            }
            Op::Sigmoid(input) => {
                if self.requires(input) {
                    let y = self.nodes[id].value.data();
                    let g = ensure(grads, input.0, y.len());
                    for ((gi, si), yi) in g.iter_mut().zip(seed).zip(y) {
                        *gi += si * yi * (1.0 - yi);
                    }
                }
            }
            Op::Relu(input) => {
                if self.requires(input) {
                    let x = self.nodes[input.0].value.data();
                    let g = ensure(grads, input.0, x.len());
                    for ((gi, si), xi) in g.iter_mut().zip(seed).zip(x) {
                        if *xi > 0.0 {
                            *gi += si;
                        }
                    }
                }
            }
            Op::Softmax(input) => {
                if self.requires(input) {
                    let y = self.nodes[id].value.data();
                    let row = *self.nodes[id].value.shape().last().unwrap();
                    let g = ensure(grads, input.0, y.len());
                    let rows = y.len() / row;
                    for r in 0..rows {
                        let y_row = &y[r * row..(r + 1) * row];
                        let s_row = &seed[r * row..(r + 1) * row];
                        let dot: f64 = y_row.iter().zip(s_row).map(|(yi, si)| yi * si).sum();
                        for ((gi, yi), si) in g[r * row..(r + 1) * row]
                            .iter_mut()
                            .zip(y_row)
                            .zip(s_row)
                        {
                            *gi += yi * (si - dot);
                        }
                    }
                }
            }
            Op::Sum(input) => {
                if self.requires(input) {
                    let numel = self.nodes[input.0].value.numel();
                    let g = ensure(grads, input.0, numel);
                    for gi in g.iter_mut() {
                        *gi += seed[0];
                    }
                }
            }
            Op::Mean(input) => {
                if self.requires(input) {
                    let numel = self.nodes[input.0].value.numel();
                    let g = ensure(grads, input.0, numel);
                    let scale = seed[0] / numel as f64;
                    for gi in g.iter_mut() {
                        *gi += scale;
                    }
                }
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let sx = self.nodes[input.0].value.shape().to_vec();
                let sw = self.nodes[weight.0].value.shape().to_vec();
                let (n, f_in, t_in) = (sx[0], sx[1], sx[2]);
                let (f_out, k) = (sw[0], sw[2]);
                let t_out = self.nodes[id].value.shape()[2];
                if self.requires(input) {
                    let w = self.nodes[weight.0].value.data();
                    let g = ensure(grads, input.0, n * f_in * t_in);
                    conv1d_backward_input(
                        g, w, seed, n, f_in, t_in, f_out, k, stride, padding, t_out,
                    );
                }
                if self.requires(weight) {
                    let x = self.nodes[input.0].value.data();
                    let g = ensure(grads, weight.0, f_out * f_in * k);
                    conv1d_backward_weight(
                        g, x, seed, n, f_in, t_in, f_out, k, stride, padding, t_out,
                    );
                }
                if self.requires(bias) {
                    let g = ensure(grads, bias.0, f_out);
                    for sample in seed.chunks_exact(f_out * t_out) {
                        for (fo, gfo) in g.iter_mut().enumerate() {
                            let row = &sample[fo * t_out..(fo + 1) * t_out];
                            *gfo += row.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::NllFromProbs { probs, labels } => {
                if self.requires(probs) {
                    let t = &self.nodes[probs.0].value;
                    let classes = t.shape()[1];
                    let n = labels.len() as f64;
                    let p_data = t.data();
                    let g = ensure(grads, probs.0, p_data.len());
                    for (row, &label) in labels.iter().enumerate() {
                        let p = p_data[row * classes + label];
                        // Below the clamp the loss is constant in p.
                        if p >= PROB_CLAMP {
                            g[row * classes + label] += seed[0] * (-1.0 / (n * p));
                        }
                    }
                }
            }
        }
    }
}

fn ensure(grads: &mut [Option<Vec<f64>>], id: usize, numel: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; numel])
}

// ── Broadcasting helpers ─────────────────────────────────────────────────────

/// Right-aligned broadcast of two shapes; errors name the op and extents.
fn broadcast_shapes(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                details: format!("cannot broadcast {a:?} with {b:?} (axis {i}: {da} vs {db})"),
            });
        };
    }
    Ok(out)
}

/// Strides of `shape` aligned to `out_shape`, zeroed on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Walks every element of `out_shape`, yielding the linear output index and
/// the corresponding offsets into two broadcast operands.
fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel_of(out_shape);
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let rank = out_shape.len();
    let mut coords = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..total {
        f(i, ia, ib);
        // odometer increment, rightmost digit fastest
        for d in (0..rank).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            coords[d] = 0;
        }
    }
}

/// Like [`for_each_broadcast`] but for a single operand.
fn for_each_broadcast_single(
    out_shape: &[usize],
    shape: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    for_each_broadcast(out_shape, shape, &[], |i, io, _| f(i, io));
}

// ── Dense kernels ────────────────────────────────────────────────────────────

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bj) in out_row.iter_mut().zip(b_row) {
                *o += aip * bj;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    n: usize,
    f_in: usize,
    t_in: usize,
    f_out: usize,
    k: usize,
    stride: usize,
    padding: Padding,
    t_out: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * f_out * t_out];
    let pad = if padding == Padding::Same { (k - 1) / 2 } else { 0 };
    for s in 0..n {
        for fo in 0..f_out {
            let out_row = &mut out[(s * f_out + fo) * t_out..(s * f_out + fo + 1) * t_out];
            out_row.iter_mut().for_each(|v| *v = b[fo]);
            for fi in 0..f_in {
                let x_row = &x[(s * f_in + fi) * t_in..(s * f_in + fi + 1) * t_in];
                let w_row = &w[(fo * f_in + fi) * k..(fo * f_in + fi + 1) * k];
                match padding {
                    Padding::Same => {
                        for (dk, &wv) in w_row.iter().enumerate() {
                            // out[t] += w * x[t + dk - pad] over the in-range t
                            let (lo, hi) = same_range(dk, pad, t_in);
                            if lo >= hi {
                                continue;
                            }
                            let src = &x_row[(lo + dk) - pad..(hi + dk) - pad];
                            for (o, xv) in out_row[lo..hi].iter_mut().zip(src) {
                                *o += wv * xv;
                            }
                        }
                    }
                    Padding::Valid => {
                        for (dk, &wv) in w_row.iter().enumerate() {
                            for (to, o) in out_row.iter_mut().enumerate() {
                                *o += wv * x_row[to * stride + dk];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output positions `t` with `0 <= t + dk - pad < t_in`, for same padding.
fn same_range(dk: usize, pad: usize, t_in: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(dk);
    let hi = (t_in + pad).saturating_sub(dk).min(t_in);
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward_input(
    dx: &mut [f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    f_in: usize,
    t_in: usize,
    f_out: usize,
    k: usize,
    stride: usize,
    padding: Padding,
    t_out: usize,
) {
    let pad = if padding == Padding::Same { (k - 1) / 2 } else { 0 };
    for s in 0..n {
        for fo in 0..f_out {
            let dy_row = &dy[(s * f_out + fo) * t_out..(s * f_out + fo + 1) * t_out];
            for fi in 0..f_in {
                let dx_row = &mut dx[(s * f_in + fi) * t_in..(s * f_in + fi + 1) * t_in];
                let w_row = &w[(fo * f_in + fi) * k..(fo * f_in + fi + 1) * k];
                match padding {
                    Padding::Same => {
                        for (dk, &wv) in w_row.iter().enumerate() {
                            let (lo, hi) = same_range(dk, pad, t_in);
                            if lo >= hi {
                                continue;
                            }
                            let dst = &mut dx_row[(lo + dk) - pad..(hi + dk) - pad];
                            for (xv, g) in dst.iter_mut().zip(&dy_row[lo..hi]) {
                                *xv += wv * g;
                            }
                        }
                    }
                    Padding::Valid => {
                        for (dk, &wv) in w_row.iter().enumerate() {
                            for (to, g) in dy_row.iter().enumerate() {
                                dx_row[to * stride + dk] += wv * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward_weight(
    dw: &mut [f64],
    x: &[f64],
    dy: &[f64],
    n: usize,
    f_in: usize,
    t_in: usize,
    f_out: usize,
    k: usize,
    stride: usize,
    padding: Padding,
    t_out: usize,
) {
    let pad = if padding == Padding::Same { (k - 1) / 2 } else { 0 };
    for s in 0..n {
        for fo in 0..f_out {
            let dy_row = &dy[(s * f_out + fo) * t_out..(s * f_out + fo + 1) * t_out];
            for fi in 0..f_in {
                let x_row = &x[(s * f_in + fi) * t_in..(s * f_in + fi + 1) * t_in];
                let dw_row = &mut dw[(fo * f_in + fi) * k..(fo * f_in + fi + 1) * k];
                match padding {
                    Padding::Same => {
                        for (dk, dwv) in dw_row.iter_mut().enumerate() {
                            let (lo, hi) = same_range(dk, pad, t_in);
                            if lo >= hi {
                                continue;
                            }
                            let src = &x_row[(lo + dk) - pad..(hi + dk) - pad];
                            let mut acc = 0.0;
                            for (xv, g) in src.iter().zip(&dy_row[lo..hi]) {
                                acc += xv * g;
                            }
                            *dwv += acc;
                        }
                    }
                    Padding::Valid => {
                        for (dk, dwv) in dw_row.iter_mut().enumerate() {
                            let mut acc = 0.0;
                            for (to, g) in dy_row.iter().enumerate() {
                                acc += x_row[to * stride + dk] * g;
                            }
                            *dwv += acc;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn sigmoid_of_zero_is_exactly_half() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![0.0]));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn tanh_of_zero_is_exactly_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![0.0]));
        let y = g.tanh(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1.0, 1.0, 1.0], &[1, 3]).unwrap());
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!(close(p, 1.0 / 3.0, 1e-15));
        }
        let sum: f64 = g.value(y).data().iter().sum();
        assert!(close(sum, 1.0, 1e-12));
    }

    #[test]
    fn product_rule_on_scalars() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![2.0]).with_requires_grad());
        let y = g.leaf(Tensor::from_vec(vec![3.0]).with_requires_grad());
        let z = g.mul(x, y).unwrap();
        let loss = g.sum(z).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0]);
        assert_eq!(g.grad(y).unwrap(), &[2.0]);
    }

    #[test]
    fn relu_subgradient_is_zero_left_of_origin() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![-1.0, 2.0]).with_requires_grad());
        let y = g.relu(x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_input_margin_tracks_the_closest_kink() {
        let mut g = Graph::new();
        assert_eq!(g.relu_input_margin(), f64::INFINITY);
        let a = g.leaf(Tensor::from_vec(vec![-0.4, 2.0]));
        g.relu(a).unwrap();
        assert_eq!(g.relu_input_margin(), 0.4);
        // a second relu closer to the kink lowers the margin; tanh does not
        let b = g.leaf(Tensor::from_vec(vec![0.05, -3.0]));
        g.relu(b).unwrap();
        let c = g.leaf(Tensor::from_vec(vec![1e-9]));
        g.tanh(c).unwrap();
        assert_eq!(g.relu_input_margin(), 0.05);
    }

    #[test]
    fn repeated_forward_is_bit_identical() {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(vec![0.3, -1.2, 0.7, 2.5], &[2, 2]).unwrap());
            let w = g.leaf(Tensor::new(vec![1.5, -0.2, 0.4, 0.9], &[2, 2]).unwrap());
            let h = g.matmul(x, w).unwrap();
            let t = g.tanh(h).unwrap();
            let s = g.softmax(t).unwrap();
            g.value(s).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap());
        let b = g.leaf(Tensor::new(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_op_and_extents() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "missing op name: {msg}");
        assert!(msg.contains("[2, 3]"), "missing extents: {msg}");
    }

    #[test]
    fn broadcast_add_of_bias_row() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap());
        let b = g.leaf(Tensor::from_vec(vec![10.0, 20.0]).with_requires_grad());
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        // Each bias entry fed two output elements.
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn broadcast_mul_column_against_matrix() {
        let mut g = Graph::new();
        let alpha = g.leaf(Tensor::new(vec![2.0, 3.0], &[2, 1]).unwrap().with_requires_grad());
        let h = g.leaf(Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap());
        let y = g.mul(alpha, h).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 4.0, 9.0, 12.0]);
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(alpha).unwrap(), &[3.0, 7.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![1.0, 2.0], &[1, 2]).unwrap());
        let b = g.leaf(Tensor::new(vec![3.0, 4.0, 5.0, 6.0], &[1, 4]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 6]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = g.slice(c, 1, 2, 6).unwrap();
        assert_eq!(g.value(s).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn slice_gradient_scatters_into_source() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 4]).unwrap().with_requires_grad());
        let s = g.slice(x, 1, 1, 3).unwrap();
        let loss = g.sum(s).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn conv1d_valid_moving_average() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 4]).unwrap());
        let w = g.leaf(Tensor::new(vec![1.0 / 3.0; 3], &[1, 1, 3]).unwrap());
        let b = g.leaf(Tensor::from_vec(vec![0.0]));
        let y = g.conv1d(x, w, b, 1, Padding::Valid).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2]);
        let out = g.value(y).data();
        assert!(close(out[0], 2.0, 1e-15));
        assert!(close(out[1], 3.0, 1e-15));
    }

    #[test]
    fn conv1d_same_keeps_length_and_zero_pads() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1.0, 2.0, 3.0], &[1, 1, 3]).unwrap());
        let w = g.leaf(Tensor::new(vec![1.0, 1.0, 1.0], &[1, 1, 3]).unwrap());
        let b = g.leaf(Tensor::from_vec(vec![0.0]));
        let y = g.conv1d(x, w, b, 1, Padding::Same).unwrap();
        // edges see a zero pad: [0+1+2, 1+2+3, 2+3+0]
        assert_eq!(g.value(y).data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv1d_stride_two_valid_subsamples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new((1..=7).map(f64::from).collect(), &[1, 1, 7]).unwrap());
        let w = g.leaf(Tensor::new(vec![1.0, 0.0, 0.0], &[1, 1, 3]).unwrap());
        let b = g.leaf(Tensor::from_vec(vec![0.0]));
        let y = g.conv1d(x, w, b, 2, Padding::Valid).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 3]);
        assert_eq!(g.value(y).data(), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn conv1d_rejects_kernel_longer_than_input() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 1, 2]));
        let w = g.leaf(Tensor::zeros(&[1, 1, 3]));
        let b = g.leaf(Tensor::zeros(&[1]));
        let err = g.conv1d(x, w, b, 1, Padding::Valid).unwrap_err();
        assert!(err.to_string().contains("conv1d"));
    }

    #[test]
    fn nll_from_probs_is_mean_of_clamped_logs() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(vec![0.5, 0.5, 0.25, 0.75], &[2, 2]).unwrap());
        let loss = g.nll_from_probs(p, &[0, 1]).unwrap();
        let expected = -(0.5f64.ln() + 0.75f64.ln()) / 2.0;
        assert!(close(g.value(loss).data()[0], expected, 1e-15));
    }

    #[test]
    fn nll_rejects_out_of_range_label() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(vec![1.0, 0.0], &[1, 2]).unwrap());
        let err = g.nll_from_probs(p, &[2]).unwrap_err();
        assert!(matches!(err, TensorError::LabelOutOfRange { label: 2, .. }));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]).with_requires_grad());
        let y = g.relu(x).unwrap();
        let err = g.backward(y).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn unreachable_parameter_gets_exact_zero_gradient() {
        let mut g = Graph::new();
        let used = g.leaf(Tensor::from_vec(vec![2.0]).with_requires_grad());
        let unused = g.leaf(Tensor::from_vec(vec![7.0, 8.0]).with_requires_grad());
        let loss = g.sum(used).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(used).unwrap(), &[1.0]);
        assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn gradient_accumulates_across_shared_uses() {
        // loss = sum(x * x): dx = 2x
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![3.0, -4.0]).with_requires_grad());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0, -8.0]);
    }

    #[test]
    fn gradients_are_linear_in_the_loss() {
        // grad(a*f + b*g) == a*grad(f) + b*grad(g), exactly up to fp rounding
        let build = |mix: Option<(f64, f64)>| -> (Vec<f64>, Vec<f64>) {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::from_vec(vec![0.4, -1.1, 2.2]).with_requires_grad());
            let t = g.tanh(x).unwrap();
            let f_loss = g.sum(t).unwrap();
            let sq = g.mul(x, x).unwrap();
            let g_loss = g.mean(sq).unwrap();
            let loss = match mix {
                Some((a, b)) => {
                    let ca = g.leaf(Tensor::scalar(a));
                    let cb = g.leaf(Tensor::scalar(b));
                    let fa = g.mul(ca, f_loss).unwrap();
                    let gb = g.mul(cb, g_loss).unwrap();
                    g.add(fa, gb).unwrap()
                }
                None => f_loss,
            };
            g.backward(loss).unwrap();
            let grad_mixed = g.grad(x).unwrap().to_vec();
            g.backward(g_loss).unwrap();
            let grad_g = g.grad(x).unwrap().to_vec();
            (grad_mixed, grad_g)
        };
        let (grad_f, _) = build(None);
        let (grad_mixed, grad_g) = build(Some((2.5, -0.75)));
        for i in 0..3 {
            let expected = 2.5 * grad_f[i] - 0.75 * grad_g[i];
            assert!(close(grad_mixed[i], expected, 1e-12));
        }
    }

    #[test]
    fn foreign_node_id_is_rejected() {
        let mut g1 = Graph::new();
        let a = g1.leaf(Tensor::from_vec(vec![1.0]));
        let mut g2 = Graph::new();
        let err = g2.tanh(a).unwrap_err();
        assert!(matches!(err, TensorError::UnknownNode { .. }));
        let _ = a;
    }
}
