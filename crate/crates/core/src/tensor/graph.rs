use std::fmt;

use super::kernels::{self, ConvGeometry};
use super::{numel, Result, Tensor, TensorError, LOG_FLOOR, NORM_EPS};

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

/// Primitive operation recorded by a node.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    /// `ln(max(x, LOG_FLOOR))`
    Log,
    Pow(f64),
    Scale(f64),
    Shift(f64),
    ClampMin(f64),
    /// Heaviside `x > c`; carries no gradient.
    Step(f64),
    Relu,
    Softplus,
    Sigmoid,
    MatMul,
    Transpose,
    Reshape,
    BroadcastTo,
    SumTo,
    Conv2d(ConvSpec),
    ConvInputGrad(ConvSpec),
    ConvWeightGrad(ConvSpec),
    /// `(src, x)`: values of `src` at the 2×2 argmax positions of `x`.
    PoolSelect,
    /// `(g, x)`: pooled `g` scattered to the 2×2 argmax positions of `x`.
    PoolScatter,
    Concat(usize),
    Slice {
        axis: usize,
        start: usize,
    },
    PadAxis {
        axis: usize,
        start: usize,
    },
    StopGrad,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Pow(_) => "pow",
            OpKind::Scale(_) => "scale",
            OpKind::Shift(_) => "shift",
            OpKind::ClampMin(_) => "clamp_min",
            OpKind::Step(_) => "step",
            OpKind::Relu => "relu",
            OpKind::Softplus => "softplus",
            OpKind::Sigmoid => "sigmoid",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::BroadcastTo => "broadcast_to",
            OpKind::SumTo => "sum_to",
            OpKind::Conv2d(_) => "conv2d",
            OpKind::ConvInputGrad(_) => "conv2d_input_grad",
            OpKind::ConvWeightGrad(_) => "conv2d_weight_grad",
            OpKind::PoolSelect => "max_pool_select",
            OpKind::PoolScatter => "max_pool_scatter",
            OpKind::Concat(_) => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::PadAxis { .. } => "pad_axis",
            OpKind::StopGrad => "stop_grad",
        }
    }

    /// Which inputs gradients flow into.
    pub(crate) fn differentiable_input(&self, i: usize) -> bool {
        match self {
            OpKind::Step(_) | OpKind::StopGrad | OpKind::Leaf => false,
            OpKind::PoolSelect | OpKind::PoolScatter => i == 0,
            _ => true,
        }
    }
}

pub(crate) struct Node {
    pub(crate) op: OpKind,
    pub(crate) inputs: Vec<NodeId>,
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Option<Tensor>,
    /// Emitted by a backward pass whose nodes were kept in the graph.
    pub(crate) retained: bool,
}

/// Topologically ordered record of tensor operations.
///
/// Nodes can only reference earlier nodes, so the graph is acyclic by
/// construction. Shapes are checked when a node is added; values are
/// computed on demand by [`Graph::value`] / [`Graph::evaluate`] and cached
/// until a leaf is rebound.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) emitting_retained: bool,
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn op(&self, id: NodeId) -> &OpKind {
        &self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub(crate) fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownNode(id.0))
        }
    }

    pub(crate) fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, op: OpKind, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value: None,
            retained: self.emitting_retained,
        });
        id
    }

    // ---- leaves -------------------------------------------------------

    /// Bound leaf: a parameter, input or constant.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let id = self.push(OpKind::Leaf, vec![], value.shape().to_vec());
        self.nodes[id.0].value = Some(value);
        id
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    /// Unbound leaf; evaluating anything that depends on it fails until
    /// [`Graph::bind`] supplies a value.
    pub fn placeholder(&mut self, shape: &[usize]) -> NodeId {
        self.push(OpKind::Leaf, vec![], shape.to_vec())
    }

    /// Rebinds a leaf and drops every cached non-leaf value.
    pub fn bind(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        self.check(id)?;
        let node = &self.nodes[id.0];
        if node.op != OpKind::Leaf {
            return Err(TensorError::NotALeaf(id.0));
        }
        if node.shape != value.shape() {
            return Err(mismatch(
                "bind",
                format!("leaf {:?} bound to {:?}", node.shape, value.shape()),
            ));
        }
        self.nodes[id.0].value = Some(value);
        for n in &mut self.nodes {
            if n.op != OpKind::Leaf {
                n.value = None;
            }
        }
        Ok(())
    }

    // ---- evaluation ---------------------------------------------------

    pub fn value(&mut self, id: NodeId) -> Result<Tensor> {
        self.check(id)?;
        self.ensure(id)?;
        Ok(self.nodes[id.0].value.clone().expect("ensured"))
    }

    pub fn evaluate(&mut self, outputs: &[NodeId]) -> Result<Vec<Tensor>> {
        outputs.iter().map(|&id| self.value(id)).collect()
    }

    fn ensure(&mut self, target: NodeId) -> Result<()> {
        if self.nodes[target.0].value.is_some() {
            return Ok(());
        }
        let mut pending = vec![false; target.0 + 1];
        let mut stack = vec![target.0];
        pending[target.0] = true;
        while let Some(i) = stack.pop() {
            for &inp in &self.nodes[i].inputs {
                if !pending[inp.0] && self.nodes[inp.0].value.is_none() {
                    pending[inp.0] = true;
                    stack.push(inp.0);
                }
            }
        }
        for i in 0..=target.0 {
            if pending[i] {
                let value = self.compute(i)?;
                self.nodes[i].value = Some(value);
            }
        }
        Ok(())
    }

    fn compute(&self, i: usize) -> Result<Tensor> {
        let node = &self.nodes[i];
        let arg = |k: usize| -> &Tensor {
            self.nodes[node.inputs[k].0]
                .value
                .as_ref()
                .expect("inputs evaluated before consumers")
        };
        let unary = |f: &dyn Fn(f64) -> f64| arg(0).map(f);
        let binary = |f: &dyn Fn(f64, f64) -> f64| {
            let (a, b) = (arg(0), arg(1));
            Tensor::from_parts(
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            )
        };
        let out = match &node.op {
            OpKind::Leaf => return Err(TensorError::UnboundLeaf(i)),
            OpKind::Add => binary(&|a, b| a + b),
            OpKind::Sub => binary(&|a, b| a - b),
            OpKind::Mul => binary(&|a, b| a * b),
            OpKind::Div => binary(&|a, b| a / b),
            OpKind::Neg => unary(&|a| -a),
            OpKind::Exp => unary(&f64::exp),
            OpKind::Log => unary(&|a| a.max(LOG_FLOOR).ln()),
            &OpKind::Pow(p) => unary(&|a| a.powf(p)),
            &OpKind::Scale(c) => unary(&|a| a * c),
            &OpKind::Shift(c) => unary(&|a| a + c),
            &OpKind::ClampMin(c) => unary(&|a| a.max(c)),
            &OpKind::Step(c) => unary(&|a| if a > c { 1.0 } else { 0.0 }),
            OpKind::Relu => unary(&|a| a.max(0.0)),
            OpKind::Softplus => unary(&kernels::softplus),
            OpKind::Sigmoid => unary(&kernels::sigmoid),
            OpKind::MatMul => kernels::matmul(arg(0), arg(1)),
            OpKind::Transpose => kernels::transpose2(arg(0)),
            OpKind::Reshape => arg(0).reshaped(node.shape.clone())?,
            OpKind::BroadcastTo => kernels::broadcast_to(arg(0), &node.shape),
            OpKind::SumTo => kernels::sum_to(arg(0), &node.shape),
            &OpKind::Conv2d(spec) => {
                let g = geometry(arg(0).shape(), arg(1).shape(), spec);
                kernels::conv2d(arg(0), arg(1), &g)
            }
            &OpKind::ConvInputGrad(spec) => {
                let g = geometry(&node.shape, arg(1).shape(), spec);
                kernels::conv2d_input_grad(arg(0), arg(1), &g)
            }
            &OpKind::ConvWeightGrad(spec) => {
                let g = geometry(arg(0).shape(), &node.shape, spec);
                kernels::conv2d_weight_grad(arg(0), arg(1), &g)
            }
            OpKind::PoolSelect => kernels::pool_select(arg(0), arg(1)),
            OpKind::PoolScatter => kernels::pool_scatter(arg(0), arg(1)),
            &OpKind::Concat(axis) => {
                let parts: Vec<&Tensor> = (0..node.inputs.len()).map(arg).collect();
                kernels::concat(&parts, axis)
            }
            &OpKind::Slice { axis, start } => kernels::slice(arg(0), axis, start, node.shape[axis]),
            &OpKind::PadAxis { axis, start } => kernels::pad_axis(arg(0), &node.shape, axis, start),
            OpKind::StopGrad => arg(0).clone(),
        };
        if out.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: node.op.name(),
                node: i,
            });
        }
        Ok(out)
    }

    // ---- primitive constructors ----------------------------------------

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    fn binary(&mut self, op: OpKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape(op.name(), a, b)?;
        Ok(self.push(op, vec![a, b], shape))
    }

    fn unary(&mut self, op: OpKind, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, vec![a], shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(OpKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(OpKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(OpKind::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(OpKind::Div, a, b)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(OpKind::Neg, a)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(OpKind::Exp, a)
    }

    /// Natural log with the argument floored at [`LOG_FLOOR`].
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(OpKind::Log, a)
    }

    pub fn pow(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        self.unary(OpKind::Pow(p), a)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(OpKind::Scale(c), a)
    }

    pub fn shift(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(OpKind::Shift(c), a)
    }

    pub fn clamp_min(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(OpKind::ClampMin(c), a)
    }

    pub fn step(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(OpKind::Step(c), a)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(OpKind::Relu, a)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(OpKind::Softplus, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(OpKind::Sigmoid, a)
    }

    /// Identity in value, zero in gradient.
    pub fn stop_grad(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(OpKind::StopGrad, a)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(OpKind::MatMul, vec![a, b], shape))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(mismatch("transpose", format!("rank {} input", s.len())));
        }
        let shape = vec![s[1], s[0]];
        Ok(self.push(OpKind::Transpose, vec![a], shape))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        if numel(shape) != numel(self.shape(a)) || shape.contains(&0) {
            return Err(mismatch("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        if self.shape(a) == shape {
            return Ok(a);
        }
        Ok(self.push(OpKind::Reshape, vec![a], shape.to_vec()))
    }

    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        let s = self.shape(a);
        let ok = s.len() == shape.len() && s.iter().zip(shape).all(|(&d, &t)| d == t || d == 1);
        if !ok {
            return Err(mismatch("broadcast_to", format!("{s:?} -> {shape:?}")));
        }
        if s == shape {
            return Ok(a);
        }
        Ok(self.push(OpKind::BroadcastTo, vec![a], shape.to_vec()))
    }

    /// Sums over every axis where `shape` has extent one.
    pub fn sum_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        let s = self.shape(a);
        let ok = s.len() == shape.len() && s.iter().zip(shape).all(|(&d, &t)| d == t || t == 1);
        if !ok {
            return Err(mismatch("sum_to", format!("{s:?} -> {shape:?}")));
        }
        if s == shape {
            return Ok(a);
        }
        Ok(self.push(OpKind::SumTo, vec![a], shape.to_vec()))
    }

    fn conv_shapes(&self, op: &'static str, x: &[usize], w: &[usize], spec: ConvSpec) -> Result<ConvGeometry> {
        if x.len() != 4 || w.len() != 4 || x[3] != w[2] || spec.stride == 0 {
            return Err(mismatch(op, format!("input {x:?}, weight {w:?}")));
        }
        if x[1] + 2 * spec.pad < w[0] || x[2] + 2 * spec.pad < w[1] {
            return Err(mismatch(op, format!("kernel {w:?} larger than input {x:?}")));
        }
        Ok(geometry(x, w, spec))
    }

    /// NHWC convolution with weights `[kh, kw, c_in, c_out]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, spec: ConvSpec) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        let g = self.conv_shapes("conv2d", self.shape(x), self.shape(w), spec)?;
        let shape = vec![g.batch, g.out_h(), g.out_w(), g.out_c];
        Ok(self.push(OpKind::Conv2d(spec), vec![x, w], shape))
    }

    pub fn conv2d_input_grad(&mut self, gy: NodeId, w: NodeId, spec: ConvSpec, x_shape: &[usize]) -> Result<NodeId> {
        self.check(gy)?;
        self.check(w)?;
        let g = self.conv_shapes("conv2d_input_grad", x_shape, self.shape(w), spec)?;
        if self.shape(gy) != [g.batch, g.out_h(), g.out_w(), g.out_c] {
            return Err(mismatch("conv2d_input_grad", format!("upstream {:?}", self.shape(gy))));
        }
        Ok(self.push(OpKind::ConvInputGrad(spec), vec![gy, w], x_shape.to_vec()))
    }

    pub fn conv2d_weight_grad(&mut self, x: NodeId, gy: NodeId, spec: ConvSpec, w_shape: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        self.check(gy)?;
        let g = self.conv_shapes("conv2d_weight_grad", self.shape(x), w_shape, spec)?;
        if self.shape(gy) != [g.batch, g.out_h(), g.out_w(), g.out_c] {
            return Err(mismatch("conv2d_weight_grad", format!("upstream {:?}", self.shape(gy))));
        }
        Ok(self.push(OpKind::ConvWeightGrad(spec), vec![x, gy], w_shape.to_vec()))
    }

    fn pool_shape(&self, x: NodeId) -> Result<Vec<usize>> {
        let s = self.shape(x);
        if s.len() != 4 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(mismatch("max_pool", format!("input {s:?} needs even H, W")));
        }
        Ok(vec![s[0], s[1] / 2, s[2] / 2, s[3]])
    }

    pub fn pool_select(&mut self, src: NodeId, x: NodeId) -> Result<NodeId> {
        self.same_shape("max_pool_select", src, x)?;
        let out = self.pool_shape(x)?;
        Ok(self.push(OpKind::PoolSelect, vec![src, x], out))
    }

    pub fn pool_scatter(&mut self, gy: NodeId, x: NodeId) -> Result<NodeId> {
        self.check(gy)?;
        self.check(x)?;
        let pooled = self.pool_shape(x)?;
        if self.shape(gy) != pooled.as_slice() {
            return Err(mismatch(
                "max_pool_scatter",
                format!("upstream {:?} vs pooled {pooled:?}", self.shape(gy)),
            ));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(OpKind::PoolScatter, vec![gy, x], shape))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| mismatch("concat", "no inputs".into()))?;
        self.check(first)?;
        let mut shape = self.shape(first).to_vec();
        if axis >= shape.len() {
            return Err(mismatch("concat", format!("axis {axis} of {shape:?}")));
        }
        let mut extent = 0;
        for &p in parts {
            self.check(p)?;
            let s = self.shape(p);
            let compatible =
                s.len() == shape.len() && s.iter().zip(&shape).enumerate().all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", format!("{s:?} vs {shape:?}")));
            }
            extent += s[axis];
        }
        shape[axis] = extent;
        Ok(self.push(OpKind::Concat(axis), parts.to_vec(), shape))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.check(a)?;
        let s = self.shape(a);
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(mismatch(
                "slice",
                format!("[{start}, {})  of axis {axis} in {s:?}", start + len),
            ));
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        Ok(self.push(OpKind::Slice { axis, start }, vec![a], shape))
    }

    pub fn pad_axis(&mut self, a: NodeId, full: &[usize], axis: usize, start: usize) -> Result<NodeId> {
        self.check(a)?;
        let s = self.shape(a);
        let ok = axis < full.len()
            && s.len() == full.len()
            && start + s[axis] <= full[axis]
            && s.iter().zip(full).enumerate().all(|(k, (a, b))| k == axis || a == b);
        if !ok {
            return Err(mismatch("pad_axis", format!("{s:?} into {full:?} at {start}")));
        }
        Ok(self.push(OpKind::PadAxis { axis, start }, vec![a], full.to_vec()))
    }

    // ---- composites ----------------------------------------------------

    /// Broadcasts both operands to their common shape (equal ranks).
    fn broadcast_pair(&mut self, a: NodeId, b: NodeId) -> Result<(NodeId, NodeId)> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() {
            return Err(mismatch("broadcast", format!("{sa:?} vs {sb:?}")));
        }
        let mut target = Vec::with_capacity(sa.len());
        for (&x, &y) in sa.iter().zip(&sb) {
            if x != y && x != 1 && y != 1 {
                return Err(mismatch("broadcast", format!("{sa:?} vs {sb:?}")));
            }
            target.push(x.max(y));
        }
        Ok((self.broadcast_to(a, &target)?, self.broadcast_to(b, &target)?))
    }

    pub fn add_bcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = self.broadcast_pair(a, b)?;
        self.add(a, b)
    }

    pub fn sub_bcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = self.broadcast_pair(a, b)?;
        self.sub(a, b)
    }

    pub fn mul_bcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = self.broadcast_pair(a, b)?;
        self.mul(a, b)
    }

    pub fn div_bcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = self.broadcast_pair(a, b)?;
        self.div(a, b)
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let ones = vec![1; self.shape(a).len()];
        let s = self.sum_to(a, &ones)?;
        self.reshape(s, &[])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = numel(self.shape(a)) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over the last axis, keeping it with extent one.
    pub fn sum_last(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let mut shape = self.shape(a).to_vec();
        match shape.last_mut() {
            Some(d) => *d = 1,
            None => return Err(mismatch("sum_last", "rank-0 input".into())),
        }
        self.sum_to(a, &shape)
    }

    /// Dot product along the last axis (extent kept as one).
    pub fn dot_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul_bcast(a, b)?;
        self.sum_last(p)
    }

    /// `x / sqrt(‖x‖² + ε²)` along the last axis.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let sq = self.mul(x, x)?;
        let ss = self.sum_last(sq)?;
        let guarded = self.shift(ss, NORM_EPS * NORM_EPS)?;
        let norm = self.pow(guarded, 0.5)?;
        self.div_bcast(x, norm)
    }

    /// NHWC `[B, H, W, C]` -> `[B, C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(mismatch("global_avg_pool", format!("input {s:?}")));
        }
        let flat = self.reshape(x, &[s[0], s[1] * s[2], s[3]])?;
        let summed = self.sum_to(flat, &[s[0], 1, s[3]])?;
        let pooled = self.reshape(summed, &[s[0], s[3]])?;
        self.scale(pooled, 1.0 / (s[1] * s[2]) as f64)
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.pool_select(x, x)
    }

    /// `x · w + b` for `x: [B, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        let out = self.shape(b).to_vec();
        let b2 = self.reshape(b, &[1, numel(&out)])?;
        self.add_bcast(y, b2)
    }
}

pub(crate) fn geometry(x: &[usize], w: &[usize], spec: ConvSpec) -> ConvGeometry {
    ConvGeometry {
        batch: x[0],
        in_h: x[1],
        in_w: x[2],
        in_c: x[3],
        k_h: w[0],
        k_w: w[1],
        out_c: w[3],
        stride: spec.stride,
        pad: spec.pad,
    }
}
