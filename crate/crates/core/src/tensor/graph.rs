//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation evaluates
//! eagerly, stores its value, and records its parents; since parents always
//! precede children in the arena, walking it backwards is a valid reverse
//! topological order. A fresh graph is built for each training step.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{broadcast_shape, conv2d_output_extent, Tensor};
use crate::error::{Error, Result};

/// Radicands below this value get a zero derivative in [`Graph::sqrt`].
pub const SQRT_GUARD: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Gradient flows to the first maximal element in row-major order.
    Max,
}

/// Operation tag of a node, used for op counting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Relu,
    Add,
    Sub,
    Mul,
    Scale,
    Sqrt,
    Square,
    Conv2d,
    Dense,
    Matmul,
    Transpose,
    Sum,
    Mean,
    Max,
    GlobalAvgPool,
    SoftmaxCrossEntropy,
    Concat,
    Reshape,
    Narrow,
    Select,
    BroadcastTo,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Relu => "relu",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sqrt => "sqrt",
            OpKind::Square => "square",
            OpKind::Conv2d => "conv2d",
            OpKind::Dense => "dense",
            OpKind::Matmul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Max => "max",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::Concat => "concat",
            OpKind::Reshape => "reshape",
            OpKind::Narrow => "narrow",
            OpKind::Select => "select",
            OpKind::BroadcastTo => "broadcast_to",
        }
    }
}

impl std::str::FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown op `{s}`"))
    }
}

impl OpKind {
    /// Every differentiable operation kind.
    pub const ALL: [OpKind; 21] = [
        OpKind::Relu,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Sqrt,
        OpKind::Square,
        OpKind::Conv2d,
        OpKind::Dense,
        OpKind::Matmul,
        OpKind::Transpose,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Max,
        OpKind::GlobalAvgPool,
        OpKind::SoftmaxCrossEntropy,
        OpKind::Concat,
        OpKind::Reshape,
        OpKind::Narrow,
        OpKind::Select,
        OpKind::BroadcastTo,
    ];
}

#[derive(Debug)]
enum Op {
    Leaf,
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sqrt(Var),
    Square(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Matmul(Var, Var),
    Transpose(Var),
    Reduce {
        input: Var,
        kind: ReduceKind,
        // output index of each input element
        map: Vec<usize>,
        // for Max: the input index selected for each output element
        argmax: Vec<usize>,
        count: usize,
    },
    GlobalAvgPool(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        target: Vec<f64>,
        probs: Vec<f64>,
    },
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        inner_a: usize,
        inner_b: usize,
    },
    Reshape(Var),
    Narrow {
        input: Var,
        outer: usize,
        inner_in: usize,
        offset: usize,
        inner_out: usize,
    },
    BroadcastTo(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Relu(_) => OpKind::Relu,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Square(_) => OpKind::Square,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Dense { .. } => OpKind::Dense,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reduce { kind, .. } => match kind {
                ReduceKind::Sum => OpKind::Sum,
                ReduceKind::Mean => OpKind::Mean,
                ReduceKind::Max => OpKind::Max,
            },
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::BroadcastTo(_) => OpKind::BroadcastTo,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Relu(a)
            | Op::Scale(a, _)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Transpose(a)
            | Op::GlobalAvgPool(a)
            | Op::Reshape(a)
            | Op::BroadcastTo(a) => vec![a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![a, b],
            Op::Conv2d { input, kernel, .. } => vec![input, kernel],
            Op::Dense {
                input,
                weight,
                bias,
            } => vec![input, weight, bias],
            Op::Reduce { input, .. } => vec![input],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
            Op::Concat { a, b, .. } => vec![a, b],
            Op::Narrow { input, .. } => vec![input],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    kind: OpKind,
}

/// Gradients produced by [`Graph::backward`].
///
/// Every leaf created with `requires_grad = true` has an entry, zero-filled
/// when the loss does not depend on it. Interior nodes on a path to the loss
/// also keep their gradient.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, panicking if the node was not differentiated.
    pub fn wrt(&self, var: Var) -> &Tensor {
        self.get(var)
            .unwrap_or_else(|| panic!("no gradient recorded for {var:?}"))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
    margins: Vec<f64>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Count of non-leaf nodes per operation kind.
    pub fn op_counts(&self) -> HashMap<OpKind, usize> {
        let mut counts = HashMap::new();
        for node in self.nodes.iter().filter(|n| n.kind != OpKind::Leaf) {
            *counts.entry(node.kind).or_insert(0) += 1;
        }
        counts
    }

    /// Number of non-leaf nodes.
    pub fn op_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.kind != OpKind::Leaf).count()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].kind
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Test hook: corrupts the backward rule of every node of `kind` by
    /// scaling the gradient it sends to its parents by 1.5.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Records how far a caller-side discrete choice (branch, argmax, ...) is
    /// from flipping, so finite-difference checks can avoid kinks.
    pub fn note_margin(&mut self, margin: f64) {
        self.margins.push(margin);
    }

    /// Smallest distance of any recorded quantity to a point where the graph
    /// is non-differentiable: ReLU inputs to zero, max reductions to a tie,
    /// sqrt radicands to the guard, and margins noted by callers. Nodes that
    /// do not depend on a parameter are ignored.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = self.margins.iter().copied().fold(f64::INFINITY, f64::min);
        for node in self.nodes.iter().filter(|n| n.requires_grad) {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[x.0].value.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::Sqrt(x) => {
                    for &v in self.nodes[x.0].value.data() {
                        margin = margin.min((v - SQRT_GUARD).abs());
                    }
                }
                Op::Reduce {
                    input,
                    kind: ReduceKind::Max,
                    map,
                    argmax,
                    ..
                } => {
                    let data = self.nodes[input.0].value.data();
                    let mut second = vec![f64::NEG_INFINITY; argmax.len()];
                    for (i, (&o, &v)) in map.iter().zip(data).enumerate() {
                        if i != argmax[o] {
                            second[o] = second[o].max(v);
                        }
                    }
                    for (o, &s) in second.iter().enumerate() {
                        margin = margin.min(data[argmax[o]] - s);
                    }
                }
                _ => {}
            }
        }
        margin
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        let kind = op.kind();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            kind,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Parameters use `requires_grad = true`; data and constant
    /// targets use `false`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            kind: OpKind::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    // ----- elementwise -------------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu(x))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
            Error::shape(
                op_name,
                format!("{:?} and {:?} do not broadcast", ta.shape(), tb.shape()),
            )
        })?;
        let n: usize = shape.iter().product();
        let (la, lb) = (ta.len(), tb.len());
        let (da, db) = (ta.data(), tb.data());
        let data = (0..n).map(|i| f(da[i % la], db[i % lb])).collect();
        Tensor::new(shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor))
    }

    /// Square root. The derivative is taken as 0 where the radicand is below
    /// [`SQRT_GUARD`], so perfect fits do not produce infinite gradients.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let Some(v) = t.data().iter().find(|v| **v < 0.0) {
            return Err(Error::domain("sqrt", format!("negative input {v}")));
        }
        let value = t.map(f64::sqrt);
        Ok(self.push(value, Op::Sqrt(x)))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square(x))
    }

    // ----- layers ------------------------------------------------------------

    /// 2-D convolution of an `[H, W, Cin]` input with a `[k, k, Cin, Cout]`
    /// kernel (odd `k`). Output extents follow [`conv2d_output_extent`].
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (is, ks) = (self.shape(input), self.shape(kernel));
        if is.len() != 3 || ks.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected [H,W,Cin] and [k,k,Cin,Cout], got {is:?} and {ks:?}"),
            ));
        }
        let (h, w, cin) = (is[0], is[1], is[2]);
        let (k, cout) = (ks[0], ks[3]);
        if ks[1] != k || k % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be odd and square, got {ks:?}")));
        }
        if ks[2] != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, kernel expects {}", ks[2]),
            ));
        }
        if stride == 0 {
            return Err(Error::domain("conv2d", "stride must be at least 1"));
        }
        let (Some((ho, pad_top)), Some((wo, pad_left))) = (
            conv2d_output_extent(h, k, stride, padding),
            conv2d_output_extent(w, k, stride, padding),
        ) else {
            return Err(Error::shape("conv2d", format!("input {h}x{w} smaller than kernel {k}")));
        };
        let geom = ConvGeom {
            h,
            w,
            cin,
            k,
            cout,
            stride,
            pad_top,
            pad_left,
            ho,
            wo,
        };
        let data = kernels::conv2d_forward(&geom, self.value(input).data(), self.value(kernel).data());
        let value = Tensor::new(vec![ho, wo, cout], data)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, geom }))
    }

    /// `out_j = sum_i input_i * weight_ij + bias_j` for `[d]`, `[d, m]`, `[m]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (is, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if is.len() != 1 || ws.len() != 2 || bs.len() != 1 || ws[0] != is[0] || ws[1] != bs[0] {
            return Err(Error::shape(
                "dense",
                format!("input {is:?}, weight {ws:?}, bias {bs:?} do not agree"),
            ));
        }
        let (d, m) = (ws[0], ws[1]);
        let mut data = kernels::matmul(self.value(input).data(), self.value(weight).data(), 1, d, m);
        for (o, &b) in data.iter_mut().zip(self.value(bias).data()) {
            *o += b;
        }
        let value = Tensor::vector(data);
        Ok(self.push(value, Op::Dense { input, weight, bias }))
    }

    /// `[r, d] x [d, m] -> [r, m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (r, d, m) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), r, d, m);
        let value = Tensor::new(vec![r, m], data)?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let value = Tensor::new(vec![c, r], kernels::transpose(self.value(x).data(), r, c))?;
        Ok(self.push(value, Op::Transpose(x)))
    }

    // ----- reductions --------------------------------------------------------

    /// Reduces over `axes` (all axes when empty), removing them from the shape.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let axes: Vec<usize> = if axes.is_empty() {
            (0..shape.len()).collect()
        } else {
            axes.to_vec()
        };
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::shape("reduce", format!("axis {bad} invalid for shape {shape:?}")));
        }
        if let Some(&empty) = axes.iter().find(|&&a| shape[a] == 0) {
            return Err(Error::domain("reduce", format!("axis {empty} has extent 0")));
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &n)| n)
            .collect();
        let out_len: usize = out_shape.iter().product();
        let count = if out_len == 0 { 0 } else { self.value(x).len() / out_len };
        let map = reduction_map(&shape, &axes);
        let data = self.value(x).data();
        let mut argmax = Vec::new();
        let out = match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                let mut acc = vec![0.0; out_len];
                for (&o, &v) in map.iter().zip(data) {
                    acc[o] += v;
                }
                if kind == ReduceKind::Mean {
                    let inv = 1.0 / count as f64;
                    acc.iter_mut().for_each(|v| *v *= inv);
                }
                acc
            }
            ReduceKind::Max => {
                let mut best = vec![f64::NEG_INFINITY; out_len];
                argmax = vec![usize::MAX; out_len];
                for (i, (&o, &v)) in map.iter().zip(data).enumerate() {
                    // strict comparison keeps the first maximum in row-major order
                    if argmax[o] == usize::MAX || v > best[o] {
                        best[o] = v;
                        argmax[o] = i;
                    }
                }
                best
            }
        };
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Reduce {
                input: x,
                kind,
                map,
                argmax,
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, &[])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, &[])
    }

    /// `[H, W, C] -> [C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[0] * s[1] == 0 {
            return Err(Error::shape("global_avg_pool", format!("expected non-empty [H,W,C], got {s:?}")));
        }
        let (hw, c) = (s[0] * s[1], s[2]);
        let mut acc = vec![0.0; c];
        for pix in self.value(x).data().chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(pix) {
                *a += v;
            }
        }
        let inv = 1.0 / hw as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(Tensor::vector(acc), Op::GlobalAvgPool(x)))
    }

    /// `-sum_k target_k * log softmax(logits)_k`, stabilized by subtracting the
    /// max logit. `target` must be a probability vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.rank() != 1 {
            return Err(Error::shape("softmax_cross_entropy", format!("logits must be rank 1, got {:?}", z.shape())));
        }
        if z.is_empty() {
            return Err(Error::domain("softmax_cross_entropy", "zero classes"));
        }
        if target.len() != z.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} logits vs {} targets", z.len(), target.len()),
            ));
        }
        let total: f64 = target.iter().sum();
        if (total - 1.0).abs() > 1e-9 || target.iter().any(|&t| t < 0.0) {
            return Err(Error::contract(format!("target is not a probability vector (sums to {total})")));
        }
        let max = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.data().iter().map(|&v| (v - max).exp()).collect();
        let norm: f64 = exps.iter().sum();
        let log_norm = norm.ln();
        let probs: Vec<f64> = exps.iter().map(|e| e / norm).collect();
        let loss: f64 = z
            .data()
            .iter()
            .zip(target)
            .filter(|(_, &t)| t != 0.0)
            .map(|(&v, &t)| -t * (v - max - log_norm))
            .sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                target: target.to_vec(),
                probs,
            },
        ))
    }

    // ----- structural --------------------------------------------------------

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::shape("concat", format!("{sa:?} and {sb:?} along axis {axis}")));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner_a: usize = sa[axis..].iter().product();
        let inner_b: usize = sb[axis..].iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            data.extend_from_slice(&da[o * inner_a..][..inner_a]);
            data.extend_from_slice(&db[o * inner_b..][..inner_b]);
        }
        let mut shape = sa;
        shape[axis] += sb[axis];
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                a,
                b,
                outer,
                inner_a,
                inner_b,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Slice `[start, start + len)` of `axis`, keeping the axis.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (value, op) = self.narrow_impl("narrow", x, axis, start, len)?;
        Ok(self.push(value, op))
    }

    /// Index `index` of `axis`, dropping the axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let (value, op) = self.narrow_impl("select", x, axis, index, 1)?;
        let mut shape = value.shape().to_vec();
        shape.remove(axis);
        let value = value.reshape(&shape)?;
        let var = self.push(value, op);
        self.nodes[var.0].kind = OpKind::Select;
        Ok(var)
    }

    fn narrow_impl(&self, op: &'static str, x: Var, axis: usize, start: usize, len: usize) -> Result<(Tensor, Op)> {
        let s = self.shape(x);
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(op, format!("range {start}..{} of axis {axis} in {s:?}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let tail: usize = s[axis + 1..].iter().product();
        let inner_in = s[axis] * tail;
        let inner_out = len * tail;
        let offset = start * tail;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * inner_out);
        for o in 0..outer {
            data.extend_from_slice(&src[o * inner_in + offset..][..inner_out]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        Ok((
            Tensor::new(shape, data)?,
            Op::Narrow {
                input: x,
                outer,
                inner_in,
                offset,
                inner_out,
            },
        ))
    }

    /// Repeats `x` along new leading axes; `x`'s shape must be a suffix of `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if broadcast_shape(shape, s).as_deref() != Some(shape) {
            return Err(Error::shape("broadcast_to", format!("{s:?} to {shape:?}")));
        }
        let src = self.value(x).data();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| src[i % src.len()]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(value, Op::BroadcastTo(x)))
    }

    // ----- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].as_ref() else { continue };
            let mut g = g.clone();
            if self.fault == Some(node.kind) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.propagate(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), _) => Some(Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape")),
                (None, Op::Leaf) if node.requires_grad => Some(Tensor::zeros(node.value.shape())),
                (None, _) => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match node.op {
            Op::Leaf => {}
            Op::Relu(x) => {
                let xv = self.value(x).data();
                let contrib = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, x, contrib);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(a) {
                    accumulate(grads, a, unbroadcast(g, self.value(a).len(), 1.0));
                }
                if self.wants(b) {
                    accumulate(grads, b, unbroadcast(g, self.value(b).len(), sign));
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let mut out = vec![0.0; da.len()];
                    for (i, &gv) in g.iter().enumerate() {
                        out[i % da.len()] += gv * db[i % db.len()];
                    }
                    accumulate(grads, a, out);
                }
                if self.wants(b) {
                    let mut out = vec![0.0; db.len()];
                    for (i, &gv) in g.iter().enumerate() {
                        out[i % db.len()] += gv * da[i % da.len()];
                    }
                    accumulate(grads, b, out);
                }
            }
            Op::Scale(x, factor) => {
                accumulate(grads, x, g.iter().map(|v| v * factor).collect());
            }
            Op::Sqrt(x) => {
                let xv = self.value(x).data();
                let yv = node.value.data();
                let contrib = g
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(&gv, (&xi, &yi))| if xi < SQRT_GUARD { 0.0 } else { gv * 0.5 / yi })
                    .collect();
                accumulate(grads, x, contrib);
            }
            Op::Square(x) => {
                let xv = self.value(x).data();
                accumulate(grads, x, g.iter().zip(xv).map(|(gv, v)| 2.0 * v * gv).collect());
            }
            Op::Conv2d { input, kernel, geom } => {
                let (gi, gk) = kernels::conv2d_backward(
                    &geom,
                    self.value(input).data(),
                    self.value(kernel).data(),
                    g,
                    self.wants(input),
                    self.wants(kernel),
                );
                if let Some(gi) = gi {
                    accumulate(grads, input, gi);
                }
                if let Some(gk) = gk {
                    accumulate(grads, kernel, gk);
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (d, m) = (self.value(input).len(), g.len());
                let x = self.value(input).data();
                if self.wants(input) {
                    let w = self.value(weight).data();
                    let gi = (0..d)
                        .map(|i| w[i * m..][..m].iter().zip(g).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(grads, input, gi);
                }
                if self.wants(weight) {
                    accumulate(grads, weight, kernels::matmul(x, g, d, 1, m));
                }
                if self.wants(bias) {
                    accumulate(grads, bias, g.to_vec());
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (r, d, m) = (sa[0], sa[1], sb[1]);
                if self.wants(a) {
                    let bt = kernels::transpose(self.value(b).data(), d, m);
                    accumulate(grads, a, kernels::matmul(g, &bt, r, m, d));
                }
                if self.wants(b) {
                    let at = kernels::transpose(self.value(a).data(), r, d);
                    accumulate(grads, b, kernels::matmul(&at, g, d, r, m));
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                accumulate(grads, x, kernels::transpose(g, s[0], s[1]));
            }
            Op::Reduce {
                input,
                kind,
                ref map,
                ref argmax,
                count,
            } => {
                let contrib = match kind {
                    ReduceKind::Sum => map.iter().map(|&o| g[o]).collect(),
                    ReduceKind::Mean => {
                        let inv = 1.0 / count as f64;
                        map.iter().map(|&o| g[o] * inv).collect()
                    }
                    ReduceKind::Max => {
                        let mut out = vec![0.0; map.len()];
                        for (o, &i) in argmax.iter().enumerate() {
                            out[i] += g[o];
                        }
                        out
                    }
                };
                accumulate(grads, input, contrib);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(x);
                let inv = 1.0 / (s[0] * s[1]) as f64;
                let c = s[2];
                let n = self.value(x).len();
                accumulate(grads, x, (0..n).map(|i| g[i % c] * inv).collect());
            }
            Op::SoftmaxCrossEntropy {
                logits,
                ref target,
                ref probs,
            } => {
                let contrib = probs.iter().zip(target).map(|(p, t)| (p - t) * g[0]).collect();
                accumulate(grads, logits, contrib);
            }
            Op::Concat {
                a,
                b,
                outer,
                inner_a,
                inner_b,
            } => {
                let stride = inner_a + inner_b;
                if self.wants(a) {
                    let ga = (0..outer).flat_map(|o| g[o * stride..][..inner_a].iter().copied()).collect();
                    accumulate(grads, a, ga);
                }
                if self.wants(b) {
                    let gb = (0..outer)
                        .flat_map(|o| g[o * stride + inner_a..][..inner_b].iter().copied())
                        .collect();
                    accumulate(grads, b, gb);
                }
            }
            Op::Reshape(x) => accumulate(grads, x, g.to_vec()),
            Op::Narrow {
                input,
                outer,
                inner_in,
                offset,
                inner_out,
            } => {
                let mut out = vec![0.0; outer * inner_in];
                for o in 0..outer {
                    out[o * inner_in + offset..][..inner_out].copy_from_slice(&g[o * inner_out..][..inner_out]);
                }
                accumulate(grads, input, out);
            }
            Op::BroadcastTo(x) => {
                accumulate(grads, x, unbroadcast(g, self.value(x).len(), 1.0));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, contrib: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

/// Sums a broadcast gradient back onto an operand of `len` elements.
fn unbroadcast(g: &[f64], len: usize, sign: f64) -> Vec<f64> {
    if len == g.len() {
        return g.iter().map(|v| sign * v).collect();
    }
    let mut out = vec![0.0; len];
    for (i, &v) in g.iter().enumerate() {
        out[i % len] += v;
    }
    if sign != 1.0 {
        out.iter_mut().for_each(|v| *v *= sign);
    }
    out
}

/// For each input element (row-major), the row-major index of its output
/// element after removing `axes`.
fn reduction_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut out_strides = vec![0usize; shape.len()];
    let mut stride = 1;
    for i in (0..shape.len()).rev() {
        if !axes.contains(&i) {
            out_strides[i] = stride;
            stride *= shape[i];
        }
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(g: &mut Graph, data: &[f64]) -> Var {
        g.param(Tensor::vector(data.to_vec()))
    }

    #[test]
    fn relu_values_and_zero_subgradient() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[-1.0, 0.0, 2.0]);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.5, -2.0, 3.25]);
        let z = g.constant(Tensor::scalar(0.0));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn broadcast_mismatch_is_shape_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.add(a, b), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn broadcast_gradient_sums_over_leading_axes() {
        let mut g = Graph::new();
        let a = g.param(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap());
        let b = vec_leaf(&mut g, &[1.0, 2.0, 3.0]);
        let y = g.mul(a, b).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(b).data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.wrt(a).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn sqrt_of_negative_is_domain_error() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0, -0.5]);
        assert!(matches!(g.sqrt(x), Err(Error::Domain { op: "sqrt", .. })));
    }

    #[test]
    fn sqrt_guard_zeroes_derivative_at_zero() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[0.0, 4.0]);
        let y = g.sqrt(x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.25]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0, 2.0, 3.0]);
        let y = g.square(x);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn max_routes_to_first_maximum() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0, 5.0, 5.0, 2.0]);
        let m = g.reduce(ReduceKind::Max, x, &[0]).unwrap();
        assert_eq!(g.value(m).item(), 5.0);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn reduce_over_inner_axis() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 3], vec![1.0, 4.0, 2.0, 7.0, 0.0, 7.0]).unwrap());
        let m = g.reduce(ReduceKind::Max, x, &[1]).unwrap();
        assert_eq!(g.value(m).data(), &[4.0, 7.0]);
        let s = g.reduce(ReduceKind::Sum, x, &[0]).unwrap();
        assert_eq!(g.value(s).data(), &[8.0, 4.0, 9.0]);
        let total = g.sum(m).unwrap();
        let grads = g.backward(total).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_of_constant_grid() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[3, 3], 2.5));
        let m = g.mean(x).unwrap();
        assert_eq!(g.value(m).item(), 2.5);
    }

    #[test]
    fn empty_reduction_axis_is_domain_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 0]));
        assert!(matches!(
            g.reduce(ReduceKind::Max, x, &[1]),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 2], vec![3.0, -1.0, 0.5, 9.0]).unwrap());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0; 4]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.add(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).item(), 2.0);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0, 2.0]);
        let unused = vec_leaf(&mut g, &[5.0, 6.0, 7.0]);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0, 2.0]);
        let y = g.square(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn dense_example() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0, 2.0]);
        let w = g.param(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = vec_leaf(&mut g, &[3.0, 4.0]);
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 6.0]);
    }

    #[test]
    fn dense_dimension_mismatch() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0, 2.0, 3.0]);
        let w = g.param(Tensor::zeros(&[2, 2]));
        let b = vec_leaf(&mut g, &[0.0, 0.0]);
        assert!(matches!(g.dense(x, w, b), Err(Error::Shape { op: "dense", .. })));
    }

    #[test]
    fn conv_identity_1x1() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..3 * 3 * 2).map(|i| i as f64 * 0.5 - 2.0).collect();
        let x = g.constant(Tensor::new(vec![3, 3, 2], data).unwrap());
        let k = g.param(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = g.conv2d(x, k, 1, Padding::Same).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_constant_field_valid() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[5, 5, 1], 0.7));
        let k = g.param(Tensor::full(&[3, 3, 1, 1], 1.0));
        let y = g.conv2d(x, k, 1, Padding::Valid).unwrap();
        assert_eq!(g.shape(y), &[3, 3, 1]);
        for &v in g.value(y).data() {
            assert!((v - 9.0 * 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4, 4, 3]));
        let k = g.param(Tensor::zeros(&[3, 3, 2, 4]));
        assert!(matches!(g.conv2d(x, k, 1, Padding::Same), Err(Error::Shape { op: "conv2d", .. })));
    }

    #[test]
    fn softmax_uniform_is_ln_k() {
        let mut g = Graph::new();
        let z = g.param(Tensor::vector(vec![0.3; 8]));
        let mut target = vec![0.0; 8];
        target[2] = 1.0;
        let l = g.softmax_cross_entropy(z, &target).unwrap();
        assert!((g.value(l).item() - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_peaked_is_near_zero() {
        let mut g = Graph::new();
        let z = g.param(Tensor::vector(vec![-50.0, 60.0, -20.0]));
        let l = g.softmax_cross_entropy(z, &[0.0, 1.0, 0.0]).unwrap();
        assert!(g.value(l).item() < 1e-30);
        assert!(g.value(l).item() >= 0.0);
    }

    #[test]
    fn softmax_zero_classes_is_domain_error() {
        let mut g = Graph::new();
        let z = g.param(Tensor::vector(vec![]));
        assert!(matches!(
            g.softmax_cross_entropy(z, &[]),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn concat_values_and_gradient() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1.0, 2.0]);
        let b = vec_leaf(&mut g, &[3.0]);
        let c = g.concat(a, b, 0).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(a).data(), &[1.0, 1.0]);
        assert_eq!(grads.wrt(b).data(), &[1.0]);
    }

    #[test]
    fn concat_with_empty_is_identity() {
        let mut g = Graph::new();
        let a = g.param(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let e = g.constant(Tensor::zeros(&[2, 0]));
        let c = g.concat(a, e, 1).unwrap();
        assert_eq!(g.value(c), g.value(a));
    }

    #[test]
    fn concat_off_axis_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(g.concat(a, b, 1), Err(Error::Shape { op: "concat", .. })));
    }

    #[test]
    fn concat_inner_axis_interleaves() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.concat(a, b, 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn select_and_narrow() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let row = g.select(x, 0, 1).unwrap();
        assert_eq!(g.shape(row), &[2]);
        assert_eq!(g.value(row).data(), &[3.0, 4.0]);
        let col = g.narrow(x, 1, 1, 1).unwrap();
        assert_eq!(g.value(col).data(), &[2.0, 4.0, 6.0]);
        assert_eq!(g.kind(row), OpKind::Select);
    }

    #[test]
    fn op_counts_exclude_leaves() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0]);
        let y = g.square(x);
        let _ = g.relu(y);
        assert_eq!(g.len(), 3);
        assert_eq!(g.op_count(), 2);
        assert_eq!(g.op_counts()[&OpKind::Relu], 1);
    }

    #[test]
    fn fault_injection_corrupts_named_op() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[2.0]);
        let y = g.square(x);
        let s = g.sum(y).unwrap();
        g.inject_fault(OpKind::Square);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[6.0]);
    }

    #[test]
    fn reduction_map_matches_manual() {
        // shape [2,3,2], reduce axis 1 -> [2,2]
        let map = reduction_map(&[2, 3, 2], &[1]);
        assert_eq!(map, vec![0, 1, 0, 1, 0, 1, 2, 3, 2, 3, 2, 3]);
    }
}
