//! Recording tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its inputs and eagerly computed value.
//! `backward_nodes` builds the reverse pass *as new tape nodes*, so gradients
//! are themselves differentiable; the gradient penalty's double backward
//! falls out of the same mechanism.

use std::collections::HashMap;

use super::kernels as kn;
use super::tensor::{broadcast_zip, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Ln,
    Sqrt,
    Square,
    Tanh,
    Sigmoid,
    LRelu { slope: f64 },
    Abs,
    Acos,
    Clamp { lo: f64, hi: f64 },
    Scale { c: f64 },
    AddConst,
    MatMul,
    Transpose,
    Conv { stride: usize },
    ConvGradInput { stride: usize },
    ConvGradKernel { stride: usize },
    AvgPool { k: usize },
    AvgPoolBack { k: usize },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    PadZero { axis: usize, before: usize },
    Reshape,
    ReduceSum,
    BroadcastTo,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::LRelu { .. } => "lrelu",
            Op::Abs => "abs",
            Op::Acos => "acos",
            Op::Clamp { .. } => "clamp",
            Op::Scale { .. } => "scale",
            Op::AddConst { .. } => "add_const",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv { .. } => "conv1d",
            Op::ConvGradInput { .. } => "conv1d_grad_input",
            Op::ConvGradKernel { .. } => "conv1d_grad_kernel",
            Op::AvgPool { .. } => "avg_pool1d",
            Op::AvgPoolBack { .. } => "avg_pool1d_back",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::PadZero { .. } => "pad_zero",
            Op::Reshape => "reshape",
            Op::ReduceSum { .. } => "reduce_sum",
            Op::BroadcastTo => "broadcast_to",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Gradients of a scalar with respect to trainable leaves, keyed by node id.
#[derive(Debug, Default)]
pub struct GradientMap {
    map: HashMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name().to_string() });
        }
        self.nodes.push(Node { op, inputs, value });
        Ok(self.nodes.len() - 1)
    }

    // ---- leaves -----------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Result<NodeId> {
        self.push(Op::Leaf { trainable }, vec![], value)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Constant, vec![], value)
    }

    pub fn scalar(&mut self, v: f64) -> Result<NodeId> {
        self.constant(Tensor::scalar(v))
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let v = broadcast_zip(self.value(a), self.value(b), f)?;
        self.push(op, vec![a, b], v)
    }

    fn unary(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let v = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|&x| f(x)).collect(),
        )?;
        self.push(op, vec![a], v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Neg, a, |x| -x)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Ln, a, f64::ln)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sqrt, a, f64::sqrt)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Square, a, |x| x * x)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Tanh, a, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sigmoid, a, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn lrelu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.unary(Op::LRelu { slope }, a, |x| if x >= 0.0 { x } else { slope * x })
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.lrelu(a, 0.0)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Abs, a, f64::abs)
    }

    pub fn acos(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Acos, a, f64::acos)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.unary(Op::Clamp { lo, hi }, a, |x| x.clamp(lo, hi))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(Op::Scale { c }, a, |x| c * x)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(Op::AddConst, a, |x| x + c)
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kn::matmul(self.value(a), self.value(b))?;
        self.push(Op::MatMul, vec![a, b], v)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = kn::transpose2(self.value(a))?;
        self.push(Op::Transpose, vec![a], v)
    }

    // ---- convolution / pooling --------------------------------------------

    /// Same-padded cross-correlation; kernel [k,Cin,Cout] with odd k.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, stride: usize) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::Param("conv1d stride must be >= 1".into()));
        }
        if self.value(w).rank() == 3 && self.value(w).shape()[0] % 2 == 0 {
            return Err(Error::Param(format!(
                "conv1d kernel size must be odd, got {}",
                self.value(w).shape()[0]
            )));
        }
        let v = kn::conv_fwd(self.value(x), self.value(w), stride)?;
        self.push(Op::Conv { stride }, vec![x, w], v)
    }

    fn conv_grad_input(&mut self, g: NodeId, w: NodeId, stride: usize, in_len: usize) -> Result<NodeId> {
        let v = kn::conv_grad_input(self.value(g), self.value(w), stride, in_len)?;
        self.push(Op::ConvGradInput { stride }, vec![g, w], v)
    }

    fn conv_grad_kernel(&mut self, x: NodeId, g: NodeId, stride: usize, ksize: usize) -> Result<NodeId> {
        let v = kn::conv_grad_kernel(self.value(x), self.value(g), stride, ksize)?;
        self.push(Op::ConvGradKernel { stride }, vec![x, g], v)
    }

    pub fn avg_pool1d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let v = kn::avg_pool(self.value(x), k)?;
        self.push(Op::AvgPool { k }, vec![x], v)
    }

    fn avg_pool_back(&mut self, g: NodeId, k: usize, in_len: usize) -> Result<NodeId> {
        let v = kn::avg_pool_back(self.value(g), k, in_len)?;
        self.push(Op::AvgPoolBack { k }, vec![g], v)
    }

    // ---- shape ops --------------------------------------------------------

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = kn::concat_axis(&tensors, axis)?;
        self.push(Op::Concat { axis }, parts.to_vec(), v)
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let v = kn::slice_axis(self.value(x), axis, start, len)?;
        self.push(Op::Slice { axis, start, len }, vec![x], v)
    }

    pub fn pad_zero(&mut self, x: NodeId, axis: usize, before: usize, after: usize) -> Result<NodeId> {
        let v = kn::pad_zero_axis(self.value(x), axis, before, after)?;
        self.push(Op::PadZero { axis, before }, vec![x], v)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).reshaped(shape)?;
        self.push(Op::Reshape, vec![x], v)
    }

    /// Sum over `axes`, keeping reduced dims as extent 1.
    pub fn reduce_sum(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let v = kn::reduce_sum(self.value(x), axes)?;
        self.push(Op::ReduceSum, vec![x], v)
    }

    pub fn broadcast_to(&mut self, x: NodeId, target: &[usize]) -> Result<NodeId> {
        let v = kn::broadcast_to(self.value(x), target)?;
        self.push(Op::BroadcastTo, vec![x], v)
    }

    // ---- composite helpers --------------------------------------------------

    pub fn mean_axes(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let n: usize = axes.iter().map(|&a| self.value(x).shape()[a]).product();
        let s = self.reduce_sum(x, axes)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        let s = self.reduce_sum(x, &axes)?;
        self.reshape(s, vec![1])
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Reduce `g` back to `target` shape (adjoint of implicit broadcasting).
    pub fn sum_to(&mut self, g: NodeId, target: &[usize]) -> Result<NodeId> {
        if self.value(g).shape() == target {
            return Ok(g);
        }
        let gshape = self.value(g).shape().to_vec();
        let offset = gshape.len() - target.len();
        let mut axes = Vec::new();
        for i in 0..gshape.len() {
            let keep = i >= offset && target[i - offset] == gshape[i];
            if !keep {
                axes.push(i);
            }
        }
        let r = self.reduce_sum(g, &axes)?;
        self.reshape(r, target.to_vec())
    }

    // ---- backward -----------------------------------------------------------

    /// Build the reverse pass of `output` (a scalar) as new tape nodes and
    /// return the gradient node for each of `wrt`.
    pub fn backward_nodes(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if self.value(output).len() != 1 {
            return Err(Error::Contract(format!(
                "backward target must be a scalar, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut reach = vec![false; output + 1];
        reach[output] = true;
        for id in (0..=output).rev() {
            if reach[id] {
                for &i in &self.nodes[id].inputs {
                    reach[i] = true;
                }
            }
        }
        let mut adj: Vec<Option<NodeId>> = vec![None; output + 1];
        let seed_shape = self.value(output).shape().to_vec();
        adj[output] = Some(self.constant(Tensor::full(&seed_shape, 1.0))?);
        for id in (0..=output).rev() {
            if !reach[id] {
                continue;
            }
            let g = match adj[id] {
                Some(g) => g,
                None => continue,
            };
            for (inp, gi) in self.vjp(id, g)? {
                adj[inp] = Some(match adj[inp] {
                    None => gi,
                    Some(prev) => self.add(prev, gi)?,
                });
            }
        }
        wrt.iter()
            .map(|&w| match adj.get(w).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let z = Tensor::zeros(self.value(w).shape());
                    self.constant(z)
                }
            })
            .collect()
    }

    /// Gradients of a scalar output with respect to every trainable leaf.
    pub fn backward(&mut self, output: NodeId) -> Result<GradientMap> {
        let leaves: Vec<NodeId> = (0..=output.min(self.nodes.len() - 1))
            .filter(|&id| matches!(self.nodes[id].op, Op::Leaf { trainable: true }))
            .collect();
        let grads = self.backward_nodes(output, &leaves)?;
        let mut map = HashMap::new();
        for (leaf, g) in leaves.into_iter().zip(grads) {
            map.insert(leaf, self.value(g).clone());
        }
        Ok(GradientMap { map })
    }

    /// Per-input gradient contributions of node `id` given its adjoint `g`.
    fn vjp(&mut self, id: NodeId, g: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        let op = self.nodes[id].op.clone();
        let inputs = self.nodes[id].inputs.clone();
        let out = match op {
            Op::Leaf { .. } | Op::Constant => vec![],
            Op::Add => {
                let (a, b) = (inputs[0], inputs[1]);
                let (sa, sb) = (self.shape_of(a), self.shape_of(b));
                let ga = self.sum_to(g, &sa)?;
                let gb = self.sum_to(g, &sb)?;
                vec![(a, ga), (b, gb)]
            }
            Op::Sub => {
                let (a, b) = (inputs[0], inputs[1]);
                let (sa, sb) = (self.shape_of(a), self.shape_of(b));
                let ga = self.sum_to(g, &sa)?;
                let ng = self.neg(g)?;
                let gb = self.sum_to(ng, &sb)?;
                vec![(a, ga), (b, gb)]
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (sa, sb) = (self.shape_of(a), self.shape_of(b));
                let gb_full = self.mul(g, a)?;
                let ga_full = self.mul(g, b)?;
                let ga = self.sum_to(ga_full, &sa)?;
                let gb = self.sum_to(gb_full, &sb)?;
                vec![(a, ga), (b, gb)]
            }
            Op::Div => {
                let (a, b) = (inputs[0], inputs[1]);
                let (sa, sb) = (self.shape_of(a), self.shape_of(b));
                let ga_full = self.div(g, b)?;
                // d/db (a/b) = -y/b with y = a/b
                let gy = self.mul(g, id)?;
                let gb_full = self.div(gy, b)?;
                let gb_full = self.neg(gb_full)?;
                let ga = self.sum_to(ga_full, &sa)?;
                let gb = self.sum_to(gb_full, &sb)?;
                vec![(a, ga), (b, gb)]
            }
            Op::Neg => {
                let gi = self.neg(g)?;
                vec![(inputs[0], gi)]
            }
            Op::Exp => {
                let gi = self.mul(g, id)?;
                vec![(inputs[0], gi)]
            }
            Op::Ln => {
                let gi = self.div(g, inputs[0])?;
                vec![(inputs[0], gi)]
            }
            Op::Sqrt => {
                let h = self.scale(g, 0.5)?;
                let gi = self.div(h, id)?;
                vec![(inputs[0], gi)]
            }
            Op::Square => {
                let gx = self.mul(g, inputs[0])?;
                let gi = self.scale(gx, 2.0)?;
                vec![(inputs[0], gi)]
            }
            Op::Tanh => {
                let y2 = self.square(id)?;
                let ny2 = self.neg(y2)?;
                let d = self.add_const(ny2, 1.0)?;
                let gi = self.mul(g, d)?;
                vec![(inputs[0], gi)]
            }
            Op::Sigmoid => {
                let ny = self.neg(id)?;
                let omy = self.add_const(ny, 1.0)?;
                let d = self.mul(id, omy)?;
                let gi = self.mul(g, d)?;
                vec![(inputs[0], gi)]
            }
            Op::LRelu { slope } => {
                // slope mask captured at forward values; constant in further passes
                let mask = self.mask_of(inputs[0], |x| if x >= 0.0 { 1.0 } else { slope })?;
                let gi = self.mul(g, mask)?;
                vec![(inputs[0], gi)]
            }
            Op::Abs => {
                let mask = self.mask_of(inputs[0], |x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })?;
                let gi = self.mul(g, mask)?;
                vec![(inputs[0], gi)]
            }
            Op::Acos => {
                // d acos / dx = -1 / sqrt(1 - x^2)
                let x2 = self.square(inputs[0])?;
                let nx2 = self.neg(x2)?;
                let d = self.add_const(nx2, 1.0)?;
                let r = self.sqrt(d)?;
                let q = self.div(g, r)?;
                let gi = self.neg(q)?;
                vec![(inputs[0], gi)]
            }
            Op::Clamp { lo, hi } => {
                let mask = self.mask_of(inputs[0], |x| if x > lo && x < hi { 1.0 } else { 0.0 })?;
                let gi = self.mul(g, mask)?;
                vec![(inputs[0], gi)]
            }
            Op::Scale { c } => {
                let gi = self.scale(g, c)?;
                vec![(inputs[0], gi)]
            }
            Op::AddConst { .. } => vec![(inputs[0], g)],
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let bt = self.transpose(b)?;
                let ga = self.matmul(g, bt)?;
                let at = self.transpose(a)?;
                let gb = self.matmul(at, g)?;
                vec![(a, ga), (b, gb)]
            }
            Op::Transpose => {
                let gi = self.transpose(g)?;
                vec![(inputs[0], gi)]
            }
            Op::Conv { stride } => {
                let (x, w) = (inputs[0], inputs[1]);
                let in_len = self.value(x).shape()[1];
                let ksize = self.value(w).shape()[0];
                let gx = self.conv_grad_input(g, w, stride, in_len)?;
                let gw = self.conv_grad_kernel(x, g, stride, ksize)?;
                vec![(x, gx), (w, gw)]
            }
            Op::ConvGradInput { stride } => {
                // trilinear form: swap roles
                let (gin, w) = (inputs[0], inputs[1]);
                let ksize = self.value(w).shape()[0];
                let v = kn::conv_fwd(self.value(g), self.value(w), stride)?;
                let g_gin = self.push(Op::Conv { stride }, vec![g, w], v)?;
                let gw = self.conv_grad_kernel(g, gin, stride, ksize)?;
                vec![(gin, g_gin), (w, gw)]
            }
            Op::ConvGradKernel { stride } => {
                let (x, gin) = (inputs[0], inputs[1]);
                let in_len = self.value(x).shape()[1];
                let gx = self.conv_grad_input(gin, g, stride, in_len)?;
                let v = kn::conv_fwd(self.value(x), self.value(g), stride)?;
                let g_gin = self.push(Op::Conv { stride }, vec![x, g], v)?;
                vec![(x, gx), (gin, g_gin)]
            }
            Op::AvgPool { k } => {
                let in_len = self.value(inputs[0]).shape()[1];
                let gi = self.avg_pool_back(g, k, in_len)?;
                vec![(inputs[0], gi)]
            }
            Op::AvgPoolBack { k } => {
                let gi = self.avg_pool1d(g, k)?;
                vec![(inputs[0], gi)]
            }
            Op::Concat { axis } => {
                let mut out = Vec::with_capacity(inputs.len());
                let mut at = 0usize;
                for &p in &inputs {
                    let dim = self.value(p).shape()[axis];
                    let gp = self.slice(g, axis, at, dim)?;
                    out.push((p, gp));
                    at += dim;
                }
                out
            }
            Op::Slice { axis, start, len } => {
                let dim = self.value(inputs[0]).shape()[axis];
                let gi = self.pad_zero(g, axis, start, dim - start - len)?;
                vec![(inputs[0], gi)]
            }
            Op::PadZero { axis, before } => {
                let dim = self.value(inputs[0]).shape()[axis];
                let gi = self.slice(g, axis, before, dim)?;
                vec![(inputs[0], gi)]
            }
            Op::Reshape => {
                let shape = self.value(inputs[0]).shape().to_vec();
                let gi = self.reshape(g, shape)?;
                vec![(inputs[0], gi)]
            }
            Op::ReduceSum { .. } => {
                let shape = self.value(inputs[0]).shape().to_vec();
                let gi = self.broadcast_to(g, &shape)?;
                vec![(inputs[0], gi)]
            }
            Op::BroadcastTo => {
                let shape = self.value(inputs[0]).shape().to_vec();
                let gi = self.sum_to(g, &shape)?;
                vec![(inputs[0], gi)]
            }
        };
        Ok(out)
    }

    fn shape_of(&self, id: NodeId) -> Vec<usize> {
        self.value(id).shape().to_vec()
    }

    /// Constant elementwise mask derived from a node's forward value.
    fn mask_of(&mut self, id: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let t = Tensor::new(
            self.value(id).shape().to_vec(),
            self.value(id).data().iter().map(|&x| f(x)).collect(),
        )?;
        self.constant(t)
    }

    pub fn is_trainable_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id].op, Op::Leaf { trainable: true })
    }
}
