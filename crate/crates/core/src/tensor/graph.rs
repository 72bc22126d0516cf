//! Define-by-run reverse-mode autodiff tape.
//!
//! Ops append [`Node`]s to a [`Graph`]; node ids are handles in insertion
//! order, which is also a valid topological order because every op only
//! references earlier nodes. `backward` walks the tape once in reverse and
//! accumulates gradients into every `requires_grad` leaf.
//!
//! Every op validates operand shapes up front and checks its output for
//! NaN/Inf, so numerical failures surface at the node that produced them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard threshold: norms at or below this are treated as zero and rejected
/// rather than clamped.
pub const NORM_EPSILON: f64 = 1e-12;

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Matmul(NodeId, NodeId),
    Transpose2d(NodeId),
    BiasAdd(NodeId, NodeId),
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    GlobalAvgPool(NodeId),
    Reshape(NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { input: NodeId, axis: usize, start: usize, len: usize },
    L2Normalize { input: NodeId, axis: usize },
    CosineRows(NodeId, NodeId),
    LogSoftmax(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Reverse-mode autodiff tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Splits `shape` around `axis` into (outer, axis_len, inner) block sizes for
/// row-major stride arithmetic.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf holding `value`. Gradients flow into it iff
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, value, grad: None, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Adds a non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// Value held at `id`.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated at `id` by the most recent `backward`, if any.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        let node = &self.nodes[id.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape().to_vec(),
            data: g.clone(),
        })
    }

    fn check_id(&self, id: NodeId, op: &str) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::ShapeMismatch {
                op: op.into(),
                detail: format!("node id {} out of range (graph has {} nodes)", id.0, self.nodes.len()),
            });
        }
        Ok(())
    }

    fn push(&mut self, op: Op, op_name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        let idx = self.nodes.len();
        let value = Tensor::checked(shape, data, &format!("{op_name} (node {idx})"))?;
        let requires_grad = self.op_inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, value, grad: None, requires_grad });
        Ok(NodeId(idx))
    }

    fn op_inputs(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::BiasAdd(a, b) | Op::CosineRows(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Transpose2d(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::GlobalAvgPool(a)
            | Op::Reshape(a)
            | Op::LogSoftmax(a) => vec![*a],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                if let Some(b) = b {
                    v.push(*b);
                }
                v
            }
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { input, .. } | Op::L2Normalize { input, .. } => vec![*input],
        }
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Result<Vec<usize>> {
        self.check_id(a, op)?;
        self.check_id(b, op)?;
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: op.into(),
                detail: format!("operand shapes {sa:?} vs {sb:?}"),
            });
        }
        Ok(sa.to_vec())
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_same_shape(a, b, "add")?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add(a, b), "add", shape, data)
    }

    /// Elementwise difference `a - b`; shapes must match exactly.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_same_shape(a, b, "sub")?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x - y)
            .collect();
        self.push(Op::Sub(a, b), "sub", shape, data)
    }

    /// Elementwise (Hadamard) product; shapes must match exactly.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_same_shape(a, b, "mul")?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        self.push(Op::Mul(a, b), "mul", shape, data)
    }

    /// Multiplies every element by a finite constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check_id(a, "scale")?;
        if !c.is_finite() {
            return Err(Error::NonFinite { context: "scale constant".into() });
        }
        let shape = self.nodes[a.0].value.shape().to_vec();
        let data = self.nodes[a.0].value.data().iter().map(|x| x * c).collect();
        self.push(Op::Scale(a, c), "scale", shape, data)
    }

    /// Adds a finite constant to every element.
    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check_id(a, "add_const")?;
        if !c.is_finite() {
            return Err(Error::NonFinite { context: "add_const constant".into() });
        }
        let shape = self.nodes[a.0].value.shape().to_vec();
        let data = self.nodes[a.0].value.data().iter().map(|x| x + c).collect();
        self.push(Op::AddConst(a), "add_const", shape, data)
    }

    /// 2-D matrix product: `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a, "matmul")?;
        self.check_id(b, "matmul")?;
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul".into(),
                detail: format!("operand shapes {sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let va = self.nodes[a.0].value.data();
        let vb = self.nodes[b.0].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = va[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let row = &vb[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, &bv) in dst.iter_mut().zip(row) {
                    *d += aip * bv;
                }
            }
        }
        self.push(Op::Matmul(a, b), "matmul", vec![m, n], out)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose2d(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "transpose2d")?;
        let sa = self.nodes[a.0].value.shape();
        if sa.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose2d".into(),
                detail: format!("expected rank 2, got {sa:?}"),
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let va = self.nodes[a.0].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va[i * n + j];
            }
        }
        self.push(Op::Transpose2d(a), "transpose2d", vec![n, m], out)
    }

    /// Adds a length-`n` bias row to every row of an `[m, n]` tensor.
    pub fn bias_add(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check_id(a, "bias_add")?;
        self.check_id(bias, "bias_add")?;
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[bias.0].value.shape();
        if sa.len() != 2 || sb.len() != 1 || sb[0] != sa[1] {
            return Err(Error::ShapeMismatch {
                op: "bias_add".into(),
                detail: format!("matrix {sa:?} with bias {sb:?}"),
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let va = self.nodes[a.0].value.data();
        let vb = self.nodes[bias.0].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = va[i * n + j] + vb[j];
            }
        }
        self.push(Op::BiasAdd(a, bias), "bias_add", vec![m, n], out)
    }

    /// Direct 2-D convolution with zero padding.
    ///
    /// `x` is `[n, c_in, h, w]`, `w` is `[c_out, c_in, kh, kw]`, optional
    /// bias is `[c_out]`. Output is `[n, c_out, h_out, w_out]` with
    /// `h_out = (h + 2 pad - kh) / stride + 1` (floor).
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        self.check_id(x, "conv2d")?;
        self.check_id(w, "conv2d")?;
        if let Some(b) = b {
            self.check_id(b, "conv2d")?;
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("conv2d stride must be >= 1".into()));
        }
        let sx = self.nodes[x.0].value.shape().to_vec();
        let sw = self.nodes[w.0].value.shape().to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d".into(),
                detail: format!("input {sx:?} with kernel {sw:?}"),
            });
        }
        let (n, c_in, h, wdt) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wdt + 2 * pad < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d".into(),
                detail: format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, wdt + 2 * pad),
            });
        }
        if let Some(bid) = b {
            let sb = self.nodes[bid.0].value.shape();
            if sb != [c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d".into(),
                    detail: format!("bias {sb:?} with {c_out} output channels"),
                });
            }
        }
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (wdt + 2 * pad - kw) / stride + 1;
        let vx = self.nodes[x.0].value.data();
        let vw = self.nodes[w.0].value.data();
        let vb = b.map(|bid| self.nodes[bid.0].value.data().to_vec());
        let mut out = vec![0.0; n * c_out * h_out * w_out];
        for ni in 0..n {
            for co in 0..c_out {
                let bias = vb.as_ref().map_or(0.0, |v| v[co]);
                for oi in 0..h_out {
                    for oj in 0..w_out {
                        let mut acc = bias;
                        for ci in 0..c_in {
                            for u in 0..kh {
                                let ii = (oi * stride + u) as isize - pad as isize;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                for v in 0..kw {
                                    let jj = (oj * stride + v) as isize - pad as isize;
                                    if jj < 0 || jj >= wdt as isize {
                                        continue;
                                    }
                                    let xi = ((ni * c_in + ci) * h + ii as usize) * wdt + jj as usize;
                                    let wi = ((co * c_in + ci) * kh + u) * kw + v;
                                    acc += vx[xi] * vw[wi];
                                }
                            }
                        }
                        out[((ni * c_out + co) * h_out + oi) * w_out + oj] = acc;
                    }
                }
            }
        }
        self.push(
            Op::Conv2d { x, w, b, stride, pad },
            "conv2d",
            vec![n, c_out, h_out, w_out],
            out,
        )
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "relu")?;
        let shape = self.nodes[a.0].value.shape().to_vec();
        let data = self.nodes[a.0].value.data().iter().map(|&x| x.max(0.0)).collect();
        self.push(Op::Relu(a), "relu", shape, data)
    }

    /// Numerically stable elementwise logistic function.
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "sigmoid")?;
        let shape = self.nodes[a.0].value.shape().to_vec();
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        self.push(Op::Sigmoid(a), "sigmoid", shape, data)
    }

    /// Elementwise exponential.
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "exp")?;
        let shape = self.nodes[a.0].value.shape().to_vec();
        let data = self.nodes[a.0].value.data().iter().map(|&x| x.exp()).collect();
        self.push(Op::Exp(a), "exp", shape, data)
    }

    /// Elementwise natural logarithm. Non-positive inputs produce a
    /// non-finite output and therefore an error naming this node.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "log")?;
        let shape = self.nodes[a.0].value.shape().to_vec();
        let data = self.nodes[a.0].value.data().iter().map(|&x| x.ln()).collect();
        self.push(Op::Log(a), "log", shape, data)
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "sum")?;
        let total = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::Sum(a), "sum", vec![], vec![total])
    }

    /// Arithmetic mean of all elements, as a rank-0 scalar.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "mean")?;
        let n = self.nodes[a.0].value.numel();
        if n == 0 {
            return Err(Error::ShapeMismatch { op: "mean".into(), detail: "empty tensor".into() });
        }
        let total: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::Mean(a), "mean", vec![], vec![total / n as f64])
    }

    /// Spatial mean over the trailing two axes: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "global_avg_pool")?;
        let sa = self.nodes[a.0].value.shape().to_vec();
        if sa.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "global_avg_pool".into(),
                detail: format!("expected rank 4, got {sa:?}"),
            });
        }
        let (n, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        if h * w == 0 {
            return Err(Error::ShapeMismatch {
                op: "global_avg_pool".into(),
                detail: "empty spatial extent".into(),
            });
        }
        let va = self.nodes[a.0].value.data();
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            let block = &va[i * h * w..(i + 1) * h * w];
            out[i] = block.iter().sum::<f64>() / (h * w) as f64;
        }
        self.push(Op::GlobalAvgPool(a), "global_avg_pool", vec![n, c], out)
    }

    /// Reinterprets the data with a new shape of equal element count.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.check_id(a, "reshape")?;
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape".into(),
                detail: format!(
                    "cannot view {:?} as {shape:?}",
                    self.nodes[a.0].value.shape()
                ),
            });
        }
        let data = self.nodes[a.0].value.data().to_vec();
        self.push(Op::Reshape(a), "reshape", shape, data)
    }

    /// Concatenates tensors along `axis`. All other axes must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::ShapeMismatch { op: "concat".into(), detail: "no inputs".into() });
        }
        for &id in inputs {
            self.check_id(id, "concat")?;
        }
        let first = self.nodes[inputs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::ShapeMismatch {
                op: "concat".into(),
                detail: format!("axis {axis} out of range for rank {}", first.len()),
            });
        }
        let mut axis_total = 0usize;
        for &id in inputs {
            let s = self.nodes[id.0].value.shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat".into(),
                    detail: format!("incompatible shapes {first:?} vs {s:?} along axis {axis}"),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = axis_blocks(&shape, axis);
        let mut out = vec![0.0; shape.iter().product()];
        let mut offset = 0usize;
        for &id in inputs {
            let s = self.nodes[id.0].value.shape();
            let a_len = s[axis];
            let src = self.nodes[id.0].value.data();
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * a_len * inner;
                out[dst_base..dst_base + a_len * inner]
                    .copy_from_slice(&src[src_base..src_base + a_len * inner]);
            }
            offset += a_len;
        }
        self.push(Op::Concat { inputs: inputs.to_vec(), axis }, "concat", shape, out)
    }

    /// Takes `len` indices starting at `start` along `axis`.
    pub fn slice(&mut self, input: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.check_id(input, "slice")?;
        let s = self.nodes[input.0].value.shape().to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::ShapeMismatch {
                op: "slice".into(),
                detail: format!("range {start}..{} along axis {axis} of {s:?}", start + len),
            });
        }
        let (outer, a_len, inner) = axis_blocks(&s, axis);
        let src = self.nodes[input.0].value.data();
        let mut shape = s.clone();
        shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_base = (o * a_len + start) * inner;
            let dst_base = o * len * inner;
            out[dst_base..dst_base + len * inner].copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        self.push(Op::Slice { input, axis, start, len }, "slice", shape, out)
    }

    /// Scales every slice along `axis` to unit Euclidean norm. Slices with
    /// norm at or below [`NORM_EPSILON`] are an error, not a clamp.
    pub fn l2_normalize(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        self.check_id(input, "l2_normalize")?;
        let s = self.nodes[input.0].value.shape().to_vec();
        if axis >= s.len() {
            return Err(Error::ShapeMismatch {
                op: "l2_normalize".into(),
                detail: format!("axis {axis} out of range for rank {}", s.len()),
            });
        }
        let (outer, a_len, inner) = axis_blocks(&s, axis);
        let src = self.nodes[input.0].value.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut sq = 0.0;
                for a in 0..a_len {
                    let v = src[(o * a_len + a) * inner + i];
                    sq += v * v;
                }
                let norm = sq.sqrt();
                if norm <= NORM_EPSILON {
                    return Err(Error::ZeroNorm { op: "l2_normalize".into(), index: o * inner + i });
                }
                for a in 0..a_len {
                    let idx = (o * a_len + a) * inner + i;
                    out[idx] = src[idx] / norm;
                }
            }
        }
        self.push(Op::L2Normalize { input, axis }, "l2_normalize", s, out)
    }

    /// Row-wise cosine similarity of two `[n, d]` tensors, producing `[n]`.
    /// Rows with norm at or below [`NORM_EPSILON`] are an error.
    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_same_shape(a, b, "cosine_rows")?;
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "cosine_rows".into(),
                detail: format!("expected rank 2, got {shape:?}"),
            });
        }
        let (n, d) = (shape[0], shape[1]);
        let va = self.nodes[a.0].value.data();
        let vb = self.nodes[b.0].value.data();
        let mut out = vec![0.0; n];
        for r in 0..n {
            let ra = &va[r * d..(r + 1) * d];
            let rb = &vb[r * d..(r + 1) * d];
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na <= NORM_EPSILON || nb <= NORM_EPSILON {
                return Err(Error::ZeroNorm { op: "cosine_rows".into(), index: r });
            }
            out[r] = dot / (na * nb);
        }
        self.push(Op::CosineRows(a, b), "cosine_rows", vec![n], out)
    }

    /// Cosine similarity of two 1-D vectors, as a rank-0 scalar.
    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_same_shape(a, b, "cosine_similarity")?;
        if shape.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "cosine_similarity".into(),
                detail: format!("expected rank 1, got {shape:?}"),
            });
        }
        let d = shape[0];
        let ra = self.reshape(a, vec![1, d])?;
        let rb = self.reshape(b, vec![1, d])?;
        let rows = self.cosine_rows(ra, rb)?;
        self.reshape(rows, vec![])
    }

    /// Row-wise log-softmax of an `[n, k]` tensor, computed stably via the
    /// max-subtraction trick.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "log_softmax")?;
        let s = self.nodes[a.0].value.shape().to_vec();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::ShapeMismatch {
                op: "log_softmax".into(),
                detail: format!("expected rank 2 with nonzero rows, got {s:?}"),
            });
        }
        let (n, k) = (s[0], s[1]);
        let va = self.nodes[a.0].value.data();
        let mut out = vec![0.0; n * k];
        for r in 0..n {
            let row = &va[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            for j in 0..k {
                out[r * k + j] = row[j] - lse;
            }
        }
        self.push(Op::LogSoftmax(a), "log_softmax", s, out)
    }

    /// Runs reverse-mode accumulation from a one-element `loss` node and
    /// returns the gradient of every `requires_grad` leaf (zeros for leaves
    /// the loss does not depend on). Gradients from previous calls are
    /// discarded first.
    pub fn backward(&mut self, loss: NodeId) -> Result<BTreeMap<NodeId, Tensor>> {
        self.check_id(loss, "backward")?;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: self.nodes[loss.0].value.shape().to_vec() });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let (inputs, node) = self.nodes.split_at_mut(idx);
            let node = &node[0];
            let g = node.grad.as_deref().expect("checked above");
            let out_val = node.value.data();
            let out_shape = node.value.shape();

            // Gradient buffer for an input, created on demand.
            macro_rules! buf {
                ($id:expr) => {{
                    let n = &mut inputs[$id.0];
                    let len = n.value.numel();
                    n.grad.get_or_insert_with(|| vec![0.0; len])
                }};
            }
            macro_rules! wants {
                ($id:expr) => {
                    inputs[$id.0].requires_grad
                };
            }

            match &node.op {
                Op::Leaf => unreachable!("leaves are skipped"),
                Op::Add(a, b) => {
                    if wants!(a) {
                        for (d, &gv) in buf!(a).iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                    if wants!(b) {
                        for (d, &gv) in buf!(b).iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if wants!(a) {
                        for (d, &gv) in buf!(a).iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                    if wants!(b) {
                        for (d, &gv) in buf!(b).iter_mut().zip(g) {
                            *d -= gv;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if wants!(a) {
                        let vb = inputs[b.0].value.data().to_vec();
                        for ((d, &gv), &bv) in buf!(a).iter_mut().zip(g).zip(&vb) {
                            *d += gv * bv;
                        }
                    }
                    if wants!(b) {
                        let va = inputs[a.0].value.data().to_vec();
                        for ((d, &gv), &av) in buf!(b).iter_mut().zip(g).zip(&va) {
                            *d += gv * av;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if wants!(a) {
                        let c = *c;
                        for (d, &gv) in buf!(a).iter_mut().zip(g) {
                            *d += c * gv;
                        }
                    }
                }
                Op::AddConst(a) => {
                    if wants!(a) {
                        for (d, &gv) in buf!(a).iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
                Op::Matmul(a, b) => {
                    let sa = inputs[a.0].value.shape().to_vec();
                    let sb = inputs[b.0].value.shape().to_vec();
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if wants!(a) {
                        // dA = G * B^T
                        let vb = inputs[b.0].value.data().to_vec();
                        let da = buf!(a);
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[i * n + j] * vb[p * n + j];
                                }
                                da[i * k + p] += acc;
                            }
                        }
                    }
                    if wants!(b) {
                        // dB = A^T * G
                        let va = inputs[a.0].value.data().to_vec();
                        let db = buf!(b);
                        for p in 0..k {
                            for i in 0..m {
                                let aip = va[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    db[p * n + j] += aip * g[i * n + j];
                                }
                            }
                        }
                    }
                }
                Op::Transpose2d(a) => {
                    if wants!(a) {
                        let sa = inputs[a.0].value.shape().to_vec();
                        let (m, n) = (sa[0], sa[1]);
                        let da = buf!(a);
                        for i in 0..m {
                            for j in 0..n {
                                da[i * n + j] += g[j * m + i];
                            }
                        }
                    }
                }
                Op::BiasAdd(a, b) => {
                    let sa = inputs[a.0].value.shape().to_vec();
                    let (m, n) = (sa[0], sa[1]);
                    if wants!(a) {
                        for (d, &gv) in buf!(a).iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                    if wants!(b) {
                        let db = buf!(b);
                        for i in 0..m {
                            for j in 0..n {
                                db[j] += g[i * n + j];
                            }
                        }
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let sx = inputs[x.0].value.shape().to_vec();
                    let sw = inputs[w.0].value.shape().to_vec();
                    let (n, c_in, h, wdt) = (sx[0], sx[1], sx[2], sx[3]);
                    let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
                    let (h_out, w_out) = (out_shape[2], out_shape[3]);
                    let (stride, pad) = (*stride, *pad);
                    let vx = inputs[x.0].value.data().to_vec();
                    let vw = inputs[w.0].value.data().to_vec();
                    let want_x = wants!(x);
                    let want_w = wants!(w);
                    let mut dx = if want_x { vec![0.0; vx.len()] } else { Vec::new() };
                    let mut dw = if want_w { vec![0.0; vw.len()] } else { Vec::new() };
                    for ni in 0..n {
                        for co in 0..c_out {
                            for oi in 0..h_out {
                                for oj in 0..w_out {
                                    let gv = g[((ni * c_out + co) * h_out + oi) * w_out + oj];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c_in {
                                        for u in 0..kh {
                                            let ii = (oi * stride + u) as isize - pad as isize;
                                            if ii < 0 || ii >= h as isize {
                                                continue;
                                            }
                                            for v in 0..kw {
                                                let jj = (oj * stride + v) as isize - pad as isize;
                                                if jj < 0 || jj >= wdt as isize {
                                                    continue;
                                                }
                                                let xi = ((ni * c_in + ci) * h + ii as usize) * wdt
                                                    + jj as usize;
                                                let wi = ((co * c_in + ci) * kh + u) * kw + v;
                                                if want_x {
                                                    dx[xi] += gv * vw[wi];
                                                }
                                                if want_w {
                                                    dw[wi] += gv * vx[xi];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if want_x {
                        for (d, v) in buf!(x).iter_mut().zip(dx) {
                            *d += v;
                        }
                    }
                    if want_w {
                        for (d, v) in buf!(w).iter_mut().zip(dw) {
                            *d += v;
                        }
                    }
                    if let Some(bid) = b {
                        if wants!(bid) {
                            let db = buf!(bid);
                            for ni in 0..n {
                                for co in 0..c_out {
                                    let base = ((ni * c_out + co) * h_out) * w_out;
                                    db[co] += g[base..base + h_out * w_out].iter().sum::<f64>();
                                }
                            }
                        }
                    }
                }
                Op::Relu(a) => {
                    if wants!(a) {
                        let va = inputs[a.0].value.data().to_vec();
                        for ((d, &gv), &xv) in buf!(a).iter_mut().zip(g).zip(&va) {
                            if xv > 0.0 {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    if wants!(a) {
                        let y = out_val.to_vec();
                        for ((d, &gv), &yv) in buf!(a).iter_mut().zip(g).zip(&y) {
                            *d += gv * yv * (1.0 - yv);
                        }
                    }
                }
                Op::Exp(a) => {
                    if wants!(a) {
                        let y = out_val.to_vec();
                        for ((d, &gv), &yv) in buf!(a).iter_mut().zip(g).zip(&y) {
                            *d += gv * yv;
                        }
                    }
                }
                Op::Log(a) => {
                    if wants!(a) {
                        let va = inputs[a.0].value.data().to_vec();
                        for ((d, &gv), &xv) in buf!(a).iter_mut().zip(g).zip(&va) {
                            *d += gv / xv;
                        }
                    }
                }
                Op::Sum(a) => {
                    if wants!(a) {
                        let gv = g[0];
                        for d in buf!(a).iter_mut() {
                            *d += gv;
                        }
                    }
                }
                Op::Mean(a) => {
                    if wants!(a) {
                        let n = inputs[a.0].value.numel() as f64;
                        let gv = g[0] / n;
                        for d in buf!(a).iter_mut() {
                            *d += gv;
                        }
                    }
                }
                Op::GlobalAvgPool(a) => {
                    if wants!(a) {
                        let sa = inputs[a.0].value.shape().to_vec();
                        let hw = sa[2] * sa[3];
                        let da = buf!(a);
                        for i in 0..sa[0] * sa[1] {
                            let gv = g[i] / hw as f64;
                            for d in da[i * hw..(i + 1) * hw].iter_mut() {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    if wants!(a) {
                        for (d, &gv) in buf!(a).iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
                Op::Concat { inputs: parts, axis } => {
                    let axis = *axis;
                    let (outer, axis_total, inner) = axis_blocks(out_shape, axis);
                    let mut offset = 0usize;
                    for &id in parts {
                        let a_len = inputs[id.0].value.shape()[axis];
                        if wants!(id) {
                            let da = buf!(id);
                            for o in 0..outer {
                                let src_base = (o * axis_total + offset) * inner;
                                let dst_base = o * a_len * inner;
                                for t in 0..a_len * inner {
                                    da[dst_base + t] += g[src_base + t];
                                }
                            }
                        }
                        offset += a_len;
                    }
                }
                Op::Slice { input, axis, start, len } => {
                    if wants!(input) {
                        let s = inputs[input.0].value.shape().to_vec();
                        let (outer, a_len, inner) = axis_blocks(&s, *axis);
                        let da = buf!(input);
                        for o in 0..outer {
                            let dst_base = (o * a_len + start) * inner;
                            let src_base = o * len * inner;
                            for t in 0..len * inner {
                                da[dst_base + t] += g[src_base + t];
                            }
                        }
                    }
                }
                Op::L2Normalize { input, axis } => {
                    if wants!(input) {
                        let s = inputs[input.0].value.shape().to_vec();
                        let (outer, a_len, inner) = axis_blocks(&s, *axis);
                        let vx = inputs[input.0].value.data().to_vec();
                        let y = out_val.to_vec();
                        let da = buf!(input);
                        for o in 0..outer {
                            for i in 0..inner {
                                let mut sq = 0.0;
                                let mut gy = 0.0;
                                for a in 0..a_len {
                                    let idx = (o * a_len + a) * inner + i;
                                    sq += vx[idx] * vx[idx];
                                    gy += g[idx] * y[idx];
                                }
                                let norm = sq.sqrt();
                                for a in 0..a_len {
                                    let idx = (o * a_len + a) * inner + i;
                                    da[idx] += (g[idx] - y[idx] * gy) / norm;
                                }
                            }
                        }
                    }
                }
                Op::CosineRows(a, b) => {
                    let sa = inputs[a.0].value.shape().to_vec();
                    let (n, d) = (sa[0], sa[1]);
                    let va = inputs[a.0].value.data().to_vec();
                    let vb = inputs[b.0].value.data().to_vec();
                    let cos = out_val.to_vec();
                    for (target, this, other) in [(*a, &va, &vb), (*b, &vb, &va)] {
                        if !wants!(target) {
                            continue;
                        }
                        let dst = buf!(target);
                        for r in 0..n {
                            let gv = g[r];
                            if gv == 0.0 {
                                continue;
                            }
                            let rt = &this[r * d..(r + 1) * d];
                            let ro = &other[r * d..(r + 1) * d];
                            let nt = rt.iter().map(|x| x * x).sum::<f64>().sqrt();
                            let no = ro.iter().map(|x| x * x).sum::<f64>().sqrt();
                            // d cos / d this = other/(|this||other|) - cos * this/|this|^2
                            for j in 0..d {
                                dst[r * d + j] +=
                                    gv * (ro[j] / (nt * no) - cos[r] * rt[j] / (nt * nt));
                            }
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    if wants!(a) {
                        let s = inputs[a.0].value.shape().to_vec();
                        let (n, k) = (s[0], s[1]);
                        let y = out_val.to_vec();
                        let da = buf!(a);
                        for r in 0..n {
                            let gsum: f64 = g[r * k..(r + 1) * k].iter().sum();
                            for j in 0..k {
                                let idx = r * k + j;
                                da[idx] += g[idx] - y[idx].exp() * gsum;
                            }
                        }
                    }
                }
            }
        }

        let mut map = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let shape = node.value.shape().to_vec();
                let data = node.grad.clone().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                let grad = Tensor::checked(shape, data, &format!("gradient of leaf node {idx}"))?;
                map.insert(NodeId(idx), grad);
            }
        }
        Ok(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_forward_and_backward() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let b = g.leaf(t(&[2], &[10.0, 20.0]), true);
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[11.0, 22.0]);
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads[&a].data(), &[1.0, 1.0]);
        assert_eq!(grads[&b].data(), &[1.0, 1.0]);
    }

    #[test]
    fn mul_backward_exchanges_operands() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[3.0, -4.0]), true);
        let b = g.leaf(t(&[2], &[5.0, 7.0]), true);
        let p = g.mul(a, b).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads[&a].data(), &[5.0, 7.0]);
        assert_eq!(grads[&b].data(), &[3.0, -4.0]);
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.constant(t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 2]);
        assert_eq!(g.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn relu_zeroes_negatives_and_their_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let r = g.relu(a).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let loss = g.sum(r).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads[&a].data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_large_magnitudes() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[-800.0, 0.0, 800.0]));
        let s = g.sigmoid(a).unwrap();
        let v = g.value(s).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.5).abs() < 1e-15);
        assert_eq!(v[2], 1.0);
    }

    #[test]
    fn log_of_nonpositive_is_an_error_naming_the_node() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 0.0]));
        let err = g.log(a).unwrap_err();
        match err {
            Error::NonFinite { context } => assert!(context.contains("log"), "context: {context}"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn mean_and_sum_reduce_to_scalars() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let m = g.mean(a).unwrap();
        let s = g.sum(a).unwrap();
        assert_eq!(g.value(m).scalar_value().unwrap(), 2.5);
        assert_eq!(g.value(s).scalar_value().unwrap(), 10.0);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads[&a].data(), &[0.25; 4]);
    }

    #[test]
    fn concat_and_slice_roundtrip_axis0() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1, 2], &[1.0, 2.0]), true);
        let b = g.leaf(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]), true);
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c).shape(), &[3, 2]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let back = g.slice(c, 0, 1, 2).unwrap();
        assert_eq!(g.value(back).data(), g.value(b).data());
        let loss = g.sum(back).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads[&a].data(), &[0.0, 0.0]);
        assert_eq!(grads[&b].data(), &[1.0; 4]);
    }

    #[test]
    fn concat_along_inner_axis() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 3.0]));
        let b = g.constant(t(&[2, 2], &[10.0, 11.0, 30.0, 31.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 3]);
        assert_eq!(g.value(c).data(), &[1.0, 10.0, 11.0, 3.0, 30.0, 31.0]);
    }

    #[test]
    fn l2_normalize_unit_norm_example() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[3.0, 4.0]));
        let n = g.l2_normalize(a, 0).unwrap();
        let v = g.value(n).data();
        assert!((v[0] - 0.6).abs() < 1e-15);
        assert!((v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_rows_all_unit() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1.0, 2.0, 2.0, -3.0, 0.0, 4.0]));
        let n = g.l2_normalize(a, 1).unwrap();
        let v = g.value(n).data();
        for r in 0..2 {
            let norm: f64 = v[r * 3..(r + 1) * 3].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_zero_vector_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 1.0, 0.0, 0.0]));
        let err = g.l2_normalize(a, 1).unwrap_err();
        assert!(matches!(err, Error::ZeroNorm { index: 1, .. }), "got {err:?}");
    }

    #[test]
    fn cosine_similarity_known_value() {
        // [1,2,2] vs [2,1,2]: dot 8, norms 3 and 3 -> 8/9.
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[1.0, 2.0, 2.0]));
        let b = g.constant(t(&[3], &[2.0, 1.0, 2.0]));
        let c = g.cosine_similarity(a, b).unwrap();
        assert!((g.value(c).scalar_value().unwrap() - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_identical_and_opposite() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0.3, -0.7]));
        let b = g.constant(t(&[2], &[-0.3, 0.7]));
        let same = g.cosine_similarity(a, a).unwrap();
        let opp = g.cosine_similarity(a, b).unwrap();
        assert!((g.value(same).scalar_value().unwrap() - 1.0).abs() < 1e-12);
        assert!((g.value(opp).scalar_value().unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0.0, 0.0]));
        let b = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.cosine_similarity(a, b), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn log_softmax_rows_sum_to_one_in_probability() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -5.0, 0.0, 5.0]));
        let l = g.log_softmax(a).unwrap();
        let v = g.value(l).data();
        for r in 0..2 {
            let p: f64 = v[r * 3..(r + 1) * 3].iter().map(|x| x.exp()).sum();
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_is_shift_invariant_and_stable() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1000.0, 1001.0]));
        let l = g.log_softmax(a).unwrap();
        let b = g.constant(t(&[1, 2], &[0.0, 1.0]));
        let lb = g.log_softmax(b).unwrap();
        let va = g.value(l).data();
        let vb = g.value(lb).data();
        for (x, y) in va.iter().zip(vb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_identity_kernel_with_padding() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        // 3x3 kernel with centre 1: identity when pad=1, stride=1.
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(t(&[1, 1, 3, 3], &k));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv2d_stride_two_shape_and_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 4, 4], &(0..16).map(|v| v as f64).collect::<Vec<_>>()));
        let w = g.constant(t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]));
        let y = g.conv2d(x, w, None, 2, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        // Each output is the sum of a 2x2 block.
        assert_eq!(g.value(y).data(), &[10.0, 18.0, 42.0, 50.0]);
    }

    #[test]
    fn conv2d_bias_broadcasts_per_channel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let w = g.constant(Tensor::zeros(vec![2, 1, 1, 1]));
        let b = g.constant(t(&[2], &[0.5, -1.5]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5, 0.5, -1.5, -1.5, -1.5, -1.5]);
    }

    #[test]
    fn conv2d_rejects_kernel_larger_than_padded_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let w = g.constant(Tensor::zeros(vec![1, 1, 5, 5]));
        assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let err = g.backward(a).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { .. }));
    }

    #[test]
    fn backward_handles_shared_subexpressions() {
        // loss = sum(a*a) => d/da = 2a, accumulation over the two uses.
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[3.0, -5.0]), true);
        let p = g.mul(a, a).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads[&a].data(), &[6.0, -10.0]);
    }

    #[test]
    fn backward_gives_zero_gradient_to_unreached_leaf() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let b = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let loss = g.sum(a).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads[&a].data(), &[1.0, 1.0]);
        assert_eq!(grads[&b].data(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient_entry() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = g.constant(t(&[2], &[4.0, 5.0]));
        let p = g.mul(a, c).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[&a].data(), &[4.0, 5.0]);
    }

    #[test]
    fn second_backward_resets_accumulators() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let loss = g.sum(a).unwrap();
        let first = g.backward(loss).unwrap();
        let second = g.backward(loss).unwrap();
        assert_eq!(first[&a].data(), second[&a].data());
    }

    #[test]
    fn global_avg_pool_means_spatial_cells() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]), true);
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p).shape(), &[1, 2]);
        assert_eq!(g.value(p).data(), &[2.5, 25.0]);
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads[&x].data(), &[0.25; 8]);
    }
}
