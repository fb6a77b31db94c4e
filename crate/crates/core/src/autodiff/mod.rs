//! Reverse-mode automatic differentiation over a dynamic computation graph.
//!
//! Nodes are appended to a [`Graph`] in topological order and evaluated
//! eagerly. `backward` builds the adjoint of every relevant node *as graph
//! nodes*, so with `create_graph = true` the returned gradients are
//! themselves differentiable expressions. That is what lets a penalty be a
//! function of task gradients: a second `backward` through a first one.
//!
//! Gradients for unreachable targets are an error, never silent zeros.

pub mod check;

use crate::error::{Error, Result};
use crate::tensor::{
    broadcast_to, broadcast_zip, matmul as matmul_val, reduce_sum, strides_of, Tensor,
};

/// Index of a node in its graph. Only meaningful for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operation tag. Shape parameters that cannot be recovered from
/// the parents are stored inline.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Mul,
    Divide,
    Negate,
    Matmul,
    Reshape { shape: Vec<usize> },
    Slice { start: Vec<usize>, end: Vec<usize> },
    /// Adjoint of `Slice`: write into a zero tensor at `offset`.
    Embed { offset: Vec<usize>, shape: Vec<usize> },
    Concat { axis: usize },
    Sum { axes: Vec<usize>, keepdims: bool },
    Mean { axes: Vec<usize>, keepdims: bool },
    Relu,
    Exp,
    Log,
    Sqrt,
    Transpose { perm: Vec<usize> },
    Broadcast { shape: Vec<usize> },
    /// Patch extraction for valid cross-correlation: rows are output
    /// positions `(n, oh, ow)`, columns are `(c, kh, kw)`.
    Im2col { kh: usize, kw: usize, stride: usize },
    /// Adjoint of `Im2col`: scatter-add patches back onto the image.
    Col2im { kh: usize, kw: usize, stride: usize, shape: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Divide => "divide",
            Op::Negate => "negate",
            Op::Matmul => "matmul",
            Op::Reshape { .. } => "reshape",
            Op::Slice { .. } => "slice",
            Op::Embed { .. } => "embed",
            Op::Concat { .. } => "concat",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Transpose { .. } => "transpose",
            Op::Broadcast { .. } => "broadcast",
            Op::Im2col { .. } => "im2col",
            Op::Col2im { .. } => "col2im",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub parents: Vec<NodeId>,
    pub value: Tensor,
    pub requires_grad: bool,
}

/// Append-only computation graph; insertion order is topological order.
#[derive(Debug, Default)]
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

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::domain(op.name(), "non-finite result"));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            parents,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            parents: vec![],
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    // ── primitives ──────────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast_zip("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push(Op::Add, vec![a, b], v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast_zip("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.push(Op::Mul, vec![a, b], v)
    }

    pub fn divide(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast_zip("divide", self.value(a), self.value(b), |x, y| x / y)?;
        self.push(Op::Divide, vec![a, b], v)
    }

    pub fn negate(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| -x);
        self.push(Op::Negate, vec![a], v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul_val(self.value(a), self.value(b))?;
        self.push(Op::Matmul, vec![a, b], v)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a);
        let expected: usize = shape.iter().product();
        if expected != v.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} to {:?}: element counts differ", v.shape(), shape),
            ));
        }
        let v = Tensor::new(shape.clone(), v.data().to_vec())?;
        self.push(Op::Reshape { shape }, vec![a], v)
    }

    pub fn slice(&mut self, a: NodeId, start: Vec<usize>, end: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a);
        let shape = v.shape();
        if start.len() != shape.len() || end.len() != shape.len() {
            return Err(Error::shape(
                "slice",
                format!("range rank {} vs tensor rank {}", start.len(), shape.len()),
            ));
        }
        for i in 0..shape.len() {
            if start[i] >= end[i] || end[i] > shape[i] {
                return Err(Error::shape(
                    "slice",
                    format!(
                        "range {}..{} invalid for dim {} of size {}",
                        start[i], end[i], i, shape[i]
                    ),
                ));
            }
        }
        let out_shape: Vec<usize> = start.iter().zip(&end).map(|(s, e)| e - s).collect();
        let in_strides = strides_of(shape);
        let n: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut index = vec![0usize; out_shape.len()];
        let base: usize = start
            .iter()
            .zip(&in_strides)
            .map(|(s, st)| s * st)
            .sum();
        let mut off = base;
        for _ in 0..n {
            data.push(v.data()[off]);
            for axis in (0..out_shape.len()).rev() {
                index[axis] += 1;
                off += in_strides[axis];
                if index[axis] < out_shape[axis] {
                    break;
                }
                off -= in_strides[axis] * out_shape[axis];
                index[axis] = 0;
            }
        }
        let v = Tensor::new(out_shape, data)?;
        self.push(Op::Slice { start, end }, vec![a], v)
    }

    /// Write `a` into a zero tensor of `shape` at `offset` (adjoint of slice).
    pub fn embed(&mut self, a: NodeId, offset: Vec<usize>, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a);
        if offset.len() != shape.len() || v.rank() != shape.len() {
            return Err(Error::shape(
                "embed",
                format!("rank mismatch: {:?} into {:?} at {:?}", v.shape(), shape, offset),
            ));
        }
        for i in 0..shape.len() {
            if offset[i] + v.shape()[i] > shape[i] {
                return Err(Error::shape(
                    "embed",
                    format!("{:?} at {:?} exceeds {:?}", v.shape(), offset, shape),
                ));
            }
        }
        let out_strides = strides_of(&shape);
        let mut out = Tensor::zeros(&shape);
        let in_shape = v.shape().to_vec();
        let mut index = vec![0usize; in_shape.len()];
        let base: usize = offset
            .iter()
            .zip(&out_strides)
            .map(|(o, st)| o * st)
            .sum();
        let mut off = base;
        for &val in v.data() {
            out.data_mut()[off] = val;
            for axis in (0..in_shape.len()).rev() {
                index[axis] += 1;
                off += out_strides[axis];
                if index[axis] < in_shape[axis] {
                    break;
                }
                off -= out_strides[axis] * in_shape[axis];
                index[axis] = 0;
            }
        }
        self.push(Op::Embed { offset, shape }, vec![a], out)
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first_shape = self.value(inputs[0]).shape().to_vec();
        if axis >= first_shape.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {} out of range for rank {}", axis, first_shape.len()),
            ));
        }
        let mut axis_total = 0usize;
        for &id in inputs {
            let s = self.value(id).shape();
            if s.len() != first_shape.len() {
                return Err(Error::shape(
                    "concat",
                    format!("rank mismatch: {:?} vs {:?}", first_shape, s),
                ));
            }
            for d in 0..s.len() {
                if d != axis && s[d] != first_shape[d] {
                    return Err(Error::shape(
                        "concat",
                        format!("dim {} differs: {:?} vs {:?}", d, first_shape, s),
                    ));
                }
            }
            axis_total += s[axis];
        }
        let mut out_shape = first_shape.clone();
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut axis_off = 0usize;
        for &id in inputs {
            let v = self.value(id);
            let len_axis = v.shape()[axis];
            for o in 0..outer {
                let src = &v.data()[o * len_axis * inner..(o + 1) * len_axis * inner];
                let dst_start = (o * axis_total + axis_off) * inner;
                data[dst_start..dst_start + len_axis * inner].copy_from_slice(src);
            }
            axis_off += len_axis;
        }
        let v = Tensor::new(out_shape, data)?;
        self.push(Op::Concat { axis }, inputs.to_vec(), v)
    }

    fn check_axes(op: &str, axes: &[usize], rank: usize) -> Result<()> {
        for (i, &a) in axes.iter().enumerate() {
            if a >= rank {
                return Err(Error::shape(
                    op,
                    format!("axis {} out of range for rank {}", a, rank),
                ));
            }
            if axes[..i].contains(&a) {
                return Err(Error::shape(op, format!("duplicate axis {a}")));
            }
        }
        Ok(())
    }

    /// Sum over `axes`; empty `axes` sums everything to a rank-0 scalar.
    pub fn sum(&mut self, a: NodeId, axes: &[usize], keepdims: bool) -> Result<NodeId> {
        Self::check_axes("sum", axes, self.value(a).rank())?;
        let v = reduce_sum(self.value(a), axes, keepdims);
        self.push(
            Op::Sum {
                axes: axes.to_vec(),
                keepdims,
            },
            vec![a],
            v,
        )
    }

    pub fn mean(&mut self, a: NodeId, axes: &[usize], keepdims: bool) -> Result<NodeId> {
        Self::check_axes("mean", axes, self.value(a).rank())?;
        let count = reduced_count(self.value(a).shape(), axes);
        let summed = reduce_sum(self.value(a), axes, keepdims);
        let v = summed.map(|x| x / count as f64);
        self.push(
            Op::Mean {
                axes: axes.to_vec(),
                keepdims,
            },
            vec![a],
            v,
        )
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu, vec![a], v)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp, vec![a], v)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::domain("log", "input has non-positive entries"));
        }
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log, vec![a], v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::domain("sqrt", "input has negative entries"));
        }
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt, vec![a], v)
    }

    /// General axis permutation; `transpose2` covers the rank-2 case.
    pub fn transpose(&mut self, a: NodeId, perm: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a);
        let rank = v.rank();
        if perm.len() != rank {
            return Err(Error::shape(
                "transpose",
                format!("perm {:?} for rank {}", perm, rank),
            ));
        }
        let mut seen = vec![false; rank];
        for &p in &perm {
            if p >= rank || seen[p] {
                return Err(Error::shape("transpose", format!("invalid perm {perm:?}")));
            }
            seen[p] = true;
        }
        let in_strides = strides_of(v.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| v.shape()[p]).collect();
        let axis_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = v.numel();
        let mut data = Vec::with_capacity(n);
        let mut index = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..n {
            data.push(v.data()[off]);
            for axis in (0..rank).rev() {
                index[axis] += 1;
                off += axis_strides[axis];
                if index[axis] < out_shape[axis] {
                    break;
                }
                off -= axis_strides[axis] * out_shape[axis];
                index[axis] = 0;
            }
        }
        let v = Tensor::new(out_shape, data)?;
        self.push(Op::Transpose { perm }, vec![a], v)
    }

    pub fn transpose2(&mut self, a: NodeId) -> Result<NodeId> {
        self.transpose(a, vec![1, 0])
    }

    pub fn broadcast(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = broadcast_to("broadcast", self.value(a), &shape)?;
        self.push(Op::Broadcast { shape }, vec![a], v)
    }

    /// Lower `(N,C,H,W)` to the patch matrix `(N·H'·W', C·kh·kw)` for a valid
    /// cross-correlation with the given stride.
    pub fn im2col(&mut self, a: NodeId, kh: usize, kw: usize, stride: usize) -> Result<NodeId> {
        let v = self.value(a);
        let (n, c, h, w) = as4("im2col", v.shape())?;
        if stride == 0 {
            return Err(Error::InvalidArgument("im2col stride must be positive".into()));
        }
        if kh > h || kw > w {
            return Err(Error::shape(
                "im2col",
                format!("kernel {kh}x{kw} larger than input {h}x{w}"),
            ));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let cols = c * kh * kw;
        let mut data = vec![0.0; n * oh * ow * cols];
        let src = v.data();
        let mut row = 0usize;
        for img in 0..n {
            for y in 0..oh {
                for x in 0..ow {
                    let iy0 = y * stride;
                    let ix0 = x * stride;
                    let dst = &mut data[row * cols..(row + 1) * cols];
                    let mut k = 0usize;
                    for ch in 0..c {
                        let plane = (img * c + ch) * h * w;
                        for ky in 0..kh {
                            let line = plane + (iy0 + ky) * w + ix0;
                            dst[k..k + kw].copy_from_slice(&src[line..line + kw]);
                            k += kw;
                        }
                    }
                    row += 1;
                }
            }
        }
        let v = Tensor::new(vec![n * oh * ow, cols], data)?;
        self.push(Op::Im2col { kh, kw, stride }, vec![a], v)
    }

    /// Scatter-add a patch matrix back onto an image of `shape` (adjoint of
    /// `im2col` with the same geometry).
    pub fn col2im(
        &mut self,
        a: NodeId,
        kh: usize,
        kw: usize,
        stride: usize,
        shape: Vec<usize>,
    ) -> Result<NodeId> {
        let (n, c, h, w) = as4("col2im", &shape)?;
        if stride == 0 {
            return Err(Error::InvalidArgument("col2im stride must be positive".into()));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let cols = c * kh * kw;
        let v = self.value(a);
        if v.shape() != [n * oh * ow, cols] {
            return Err(Error::shape(
                "col2im",
                format!(
                    "patch matrix {:?} incompatible with image {:?} (expect {:?})",
                    v.shape(),
                    shape,
                    [n * oh * ow, cols]
                ),
            ));
        }
        let mut out = vec![0.0; n * c * h * w];
        let src = v.data();
        let mut row = 0usize;
        for img in 0..n {
            for y in 0..oh {
                for x in 0..ow {
                    let iy0 = y * stride;
                    let ix0 = x * stride;
                    let patch = &src[row * cols..(row + 1) * cols];
                    let mut k = 0usize;
                    for ch in 0..c {
                        let plane = (img * c + ch) * h * w;
                        for ky in 0..kh {
                            let line = plane + (iy0 + ky) * w + ix0;
                            for kx in 0..kw {
                                out[line + kx] += patch[k];
                                k += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        let v = Tensor::new(shape.clone(), out)?;
        self.push(Op::Col2im { kh, kw, stride, shape }, vec![a], v)
    }

    // ── composite helpers ───────────────────────────────────────────────

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.negate(b)?;
        self.add(a, nb)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.mul(a, a)
    }

    /// Σ aᵢ·bᵢ over flattened inputs of equal length, as a rank-0 node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).numel() != self.value(b).numel() {
            return Err(Error::shape(
                "dot",
                format!(
                    "lengths differ: {} vs {}",
                    self.value(a).numel(),
                    self.value(b).numel()
                ),
            ));
        }
        let n = self.value(a).numel();
        let af = self.reshape(a, vec![n])?;
        let bf = self.reshape(b, vec![n])?;
        let prod = self.mul(af, bf)?;
        self.sum(prod, &[], false)
    }

    /// Unified primitive dispatch: applies `op` to `inputs`.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = |k: usize| -> Result<()> {
            if inputs.len() != k {
                Err(Error::InvalidArgument(format!(
                    "{} expects {} inputs, got {}",
                    op.name(),
                    k,
                    inputs.len()
                )))
            } else {
                Ok(())
            }
        };
        match op.clone() {
            Op::Leaf => Err(Error::InvalidArgument(
                "leaf nodes are created via Graph::leaf".into(),
            )),
            Op::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            Op::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            Op::Divide => {
                arity(2)?;
                self.divide(inputs[0], inputs[1])
            }
            Op::Negate => {
                arity(1)?;
                self.negate(inputs[0])
            }
            Op::Matmul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Op::Reshape { shape } => {
                arity(1)?;
                self.reshape(inputs[0], shape)
            }
            Op::Slice { start, end } => {
                arity(1)?;
                self.slice(inputs[0], start, end)
            }
            Op::Embed { offset, shape } => {
                arity(1)?;
                self.embed(inputs[0], offset, shape)
            }
            Op::Concat { axis } => self.concat(inputs, axis),
            Op::Sum { axes, keepdims } => {
                arity(1)?;
                self.sum(inputs[0], &axes, keepdims)
            }
            Op::Mean { axes, keepdims } => {
                arity(1)?;
                self.mean(inputs[0], &axes, keepdims)
            }
            Op::Relu => {
                arity(1)?;
                self.relu(inputs[0])
            }
            Op::Exp => {
                arity(1)?;
                self.exp(inputs[0])
            }
            Op::Log => {
                arity(1)?;
                self.log(inputs[0])
            }
            Op::Sqrt => {
                arity(1)?;
                self.sqrt(inputs[0])
            }
            Op::Transpose { perm } => {
                arity(1)?;
                self.transpose(inputs[0], perm)
            }
            Op::Broadcast { shape } => {
                arity(1)?;
                self.broadcast(inputs[0], shape)
            }
            Op::Im2col { kh, kw, stride } => {
                arity(1)?;
                self.im2col(inputs[0], kh, kw, stride)
            }
            Op::Col2im { kh, kw, stride, shape } => {
                arity(1)?;
                self.col2im(inputs[0], kh, kw, stride, shape)
            }
        }
    }

    // ── differentiation ─────────────────────────────────────────────────

    /// True when `target` is an ancestor of `root` (gradient path exists).
    pub fn reaches(&self, root: NodeId, target: NodeId) -> bool {
        if root == target {
            return true;
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![root];
        seen[root.0] = true;
        while let Some(id) = stack.pop() {
            for &p in &self.nodes[id.0].parents {
                if p == target {
                    return true;
                }
                if !seen[p.0] {
                    seen[p.0] = true;
                    stack.push(p);
                }
            }
        }
        false
    }

    /// Reverse-mode gradients of scalar `root` with respect to `wrt`.
    ///
    /// With `create_graph = true` the returned nodes are differentiable
    /// expressions; with `false` they are detached constants. Every `wrt`
    /// entry must require grad and be reachable from `root`.
    pub fn backward(
        &mut self,
        root: NodeId,
        wrt: &[NodeId],
        create_graph: bool,
    ) -> Result<Vec<NodeId>> {
        let root_shape = self.value(root).shape().to_vec();
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot { shape: root_shape });
        }
        for (i, &w) in wrt.iter().enumerate() {
            if !self.nodes[w.0].requires_grad {
                return Err(Error::InvalidArgument(format!(
                    "wrt[{i}] (node {}) does not require grad",
                    w.0
                )));
            }
        }
        let n = self.nodes.len();
        // ancestors of root
        let mut anc = vec![false; n];
        anc[root.0] = true;
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            for &p in &self.nodes[id.0].parents {
                if !anc[p.0] {
                    anc[p.0] = true;
                    stack.push(p);
                }
            }
        }
        for (i, &w) in wrt.iter().enumerate() {
            if !anc[w.0] {
                return Err(Error::Unreachable {
                    node: format!("wrt[{i}] (node {})", w.0),
                });
            }
        }
        // relevance: nodes from which some wrt is reachable downward
        let mut rel = vec![false; n];
        for &w in wrt {
            rel[w.0] = true;
        }
        for i in 0..n {
            if !rel[i] {
                rel[i] = self.nodes[i].parents.iter().any(|p| rel[p.0]);
            }
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; n];
        let seed = self.constant(Tensor::filled(&root_shape, 1.0));
        adjoint[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let Some(grad) = adjoint[i] else { continue };
            if self.nodes[i].parents.is_empty() || !rel[i] {
                continue;
            }
            let parents = self.nodes[i].parents.clone();
            let want: Vec<bool> = parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad && rel[p.0])
                .collect();
            if !want.contains(&true) {
                continue;
            }
            let contribs = self.vjp(NodeId(i), grad, &want)?;
            debug_assert_eq!(contribs.len(), parents.len());
            for (k, contrib) in contribs.into_iter().enumerate() {
                let Some(c) = contrib else { continue };
                let p = parents[k];
                adjoint[p.0] = Some(match adjoint[p.0] {
                    None => c,
                    Some(existing) => self.add(existing, c)?,
                });
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let gid = adjoint[w.0].ok_or_else(|| Error::Unreachable {
                node: format!("node {}", w.0),
            })?;
            debug_assert_eq!(self.value(gid).shape(), self.value(w).shape());
            if create_graph {
                out.push(gid);
            } else {
                let v = self.value(gid).clone();
                out.push(self.constant(v));
            }
        }
        Ok(out)
    }

    /// Reduce `grad` to `target` shape by summing broadcast axes.
    fn reduce_to_shape(&mut self, grad: NodeId, target: &[usize]) -> Result<NodeId> {
        let gshape = self.value(grad).shape().to_vec();
        if gshape == target {
            return Ok(grad);
        }
        let lead = gshape.len() - target.len();
        let mut axes: Vec<usize> = (0..lead).collect();
        for i in 0..target.len() {
            if target[i] == 1 && gshape[lead + i] != 1 {
                axes.push(lead + i);
            }
        }
        let summed = self.sum(grad, &axes, true)?;
        self.reshape(summed, target.to_vec())
    }

    /// Build adjoint contributions for the parents of `id`, given the
    /// adjoint `grad` of its output. `want[k]` gates construction per parent.
    fn vjp(&mut self, id: NodeId, grad: NodeId, want: &[bool]) -> Result<Vec<Option<NodeId>>> {
        let op = self.nodes[id.0].op.clone();
        let parents = self.nodes[id.0].parents.clone();
        let mut out: Vec<Option<NodeId>> = vec![None; parents.len()];
        match op {
            Op::Leaf => {}
            Op::Add => {
                for k in 0..2 {
                    if want[k] {
                        let shape = self.value(parents[k]).shape().to_vec();
                        out[k] = Some(self.reduce_to_shape(grad, &shape)?);
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (parents[0], parents[1]);
                if want[0] {
                    let g = self.mul(grad, b)?;
                    let shape = self.value(a).shape().to_vec();
                    out[0] = Some(self.reduce_to_shape(g, &shape)?);
                }
                if want[1] {
                    let g = self.mul(grad, a)?;
                    let shape = self.value(b).shape().to_vec();
                    out[1] = Some(self.reduce_to_shape(g, &shape)?);
                }
            }
            Op::Divide => {
                let (a, b) = (parents[0], parents[1]);
                if want[0] {
                    let g = self.divide(grad, b)?;
                    let shape = self.value(a).shape().to_vec();
                    out[0] = Some(self.reduce_to_shape(g, &shape)?);
                }
                if want[1] {
                    // d(a/b)/db = -(a/b)/b, reusing the output node
                    let gy = self.mul(grad, id)?;
                    let gb = self.divide(gy, b)?;
                    let g = self.negate(gb)?;
                    let shape = self.value(b).shape().to_vec();
                    out[1] = Some(self.reduce_to_shape(g, &shape)?);
                }
            }
            Op::Negate => {
                if want[0] {
                    out[0] = Some(self.negate(grad)?);
                }
            }
            Op::Matmul => {
                let (a, b) = (parents[0], parents[1]);
                if want[0] {
                    let bt = self.transpose2(b)?;
                    out[0] = Some(self.matmul(grad, bt)?);
                }
                if want[1] {
                    let at = self.transpose2(a)?;
                    out[1] = Some(self.matmul(at, grad)?);
                }
            }
            Op::Reshape { .. } => {
                if want[0] {
                    let shape = self.value(parents[0]).shape().to_vec();
                    out[0] = Some(self.reshape(grad, shape)?);
                }
            }
            Op::Slice { start, .. } => {
                if want[0] {
                    let shape = self.value(parents[0]).shape().to_vec();
                    out[0] = Some(self.embed(grad, start, shape)?);
                }
            }
            Op::Embed { offset, .. } => {
                if want[0] {
                    let inner = self.value(parents[0]).shape().to_vec();
                    let end: Vec<usize> =
                        offset.iter().zip(&inner).map(|(o, s)| o + s).collect();
                    out[0] = Some(self.slice(grad, offset, end)?);
                }
            }
            Op::Concat { axis } => {
                let mut offset = 0usize;
                for (k, &p) in parents.iter().enumerate() {
                    let pshape = self.value(p).shape().to_vec();
                    let len = pshape[axis];
                    if want[k] {
                        let gshape = self.value(grad).shape().to_vec();
                        let mut start = vec![0; gshape.len()];
                        let mut end = gshape.clone();
                        start[axis] = offset;
                        end[axis] = offset + len;
                        out[k] = Some(self.slice(grad, start, end)?);
                    }
                    offset += len;
                }
            }
            Op::Sum { axes, keepdims } => {
                if want[0] {
                    let shape = self.value(parents[0]).shape().to_vec();
                    let g = self.restore_reduced(grad, &shape, &axes, keepdims)?;
                    out[0] = Some(g);
                }
            }
            Op::Mean { axes, keepdims } => {
                if want[0] {
                    let shape = self.value(parents[0]).shape().to_vec();
                    let count = reduced_count(&shape, &axes);
                    let scaled = self.mul_scalar(grad, 1.0 / count as f64)?;
                    let g = self.restore_reduced(scaled, &shape, &axes, keepdims)?;
                    out[0] = Some(g);
                }
            }
            Op::Relu => {
                if want[0] {
                    let mask = self
                        .value(parents[0])
                        .map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    let mask = self.constant(mask);
                    out[0] = Some(self.mul(grad, mask)?);
                }
            }
            Op::Exp => {
                if want[0] {
                    out[0] = Some(self.mul(grad, id)?);
                }
            }
            Op::Log => {
                if want[0] {
                    out[0] = Some(self.divide(grad, parents[0])?);
                }
            }
            Op::Sqrt => {
                if want[0] {
                    let two_y = self.mul_scalar(id, 2.0)?;
                    out[0] = Some(self.divide(grad, two_y)?);
                }
            }
            Op::Transpose { perm } => {
                if want[0] {
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    out[0] = Some(self.transpose(grad, inv)?);
                }
            }
            Op::Broadcast { .. } => {
                if want[0] {
                    let shape = self.value(parents[0]).shape().to_vec();
                    out[0] = Some(self.reduce_to_shape(grad, &shape)?);
                }
            }
            Op::Im2col { kh, kw, stride } => {
                if want[0] {
                    let shape = self.value(parents[0]).shape().to_vec();
                    out[0] = Some(self.col2im(grad, kh, kw, stride, shape)?);
                }
            }
            Op::Col2im { kh, kw, stride, .. } => {
                if want[0] {
                    out[0] = Some(self.im2col(grad, kh, kw, stride)?);
                }
            }
        }
        Ok(out)
    }

    /// Expand the gradient of a reduction back to `shape`: reshape to the
    /// kept-dims form, then broadcast.
    fn restore_reduced(
        &mut self,
        grad: NodeId,
        shape: &[usize],
        axes: &[usize],
        keepdims: bool,
    ) -> Result<NodeId> {
        let g = if keepdims {
            grad
        } else {
            let mut kept = shape.to_vec();
            if axes.is_empty() {
                kept.iter_mut().for_each(|d| *d = 1);
            } else {
                for &a in axes {
                    kept[a] = 1;
                }
            }
            self.reshape(grad, kept)?
        };
        if self.value(g).shape() == shape {
            Ok(g)
        } else {
            self.broadcast(g, shape.to_vec())
        }
    }
}

fn reduced_count(shape: &[usize], axes: &[usize]) -> usize {
    if axes.is_empty() {
        shape.iter().product()
    } else {
        axes.iter().map(|&a| shape[a]).product()
    }
}

fn as4(op: &str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::shape(
            op,
            format!("expects rank-4 (N,C,H,W), got {shape:?}"),
        ));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}
