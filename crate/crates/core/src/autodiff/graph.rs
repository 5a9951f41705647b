//! Define-then-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in construction order, which is a topological order:
//! every op only references nodes created before it. `forward` evaluates the
//! nodes in that order from a set of [`Bindings`]; `backward` sweeps them in
//! reverse and accumulates adjoints at fan-in.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use super::kernels::{self, ConvGeom};
use super::params::ParamStore;
use super::tensor::{gemm, Scalar, Tensor};
use crate::mask::{SegMask, IGNORE};
use crate::spectral;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("leaf `{0}` has no binding")]
    Unbound(String),
    #[error("labels `{0}` have no binding")]
    UnboundLabels(String),
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("loss node {node} has shape {shape:?}; backward needs a scalar")]
    NonScalarLoss { node: usize, shape: Vec<usize> },
    #[error("backward called before forward")]
    NotEvaluated,
    #[error("node {node} ({op}): {detail}")]
    Invalid {
        node: usize,
        op: &'static str,
        detail: String,
    },
}

/// Options of the phase-consistency node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseOpts {
    pub normalize: bool,
    pub eps: f64,
}

impl Default for PhaseOpts {
    fn default() -> Self {
        Self { normalize: true, eps: 1e-12 }
    }
}

#[derive(Debug, Clone)]
pub enum Op<T> {
    Input { name: String },
    Param { name: String, trainable: bool },
    Const(Tensor<T>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    },
    MaxPool2(NodeId),
    Upsample2(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Log(NodeId),
    InstanceNorm(NodeId),
    SoftmaxChannels(NodeId),
    LogSoftmaxChannels(NodeId),
    ConcatChannels(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Passes its input's value through and blocks gradients.
    Detach(NodeId),
    /// One-hot map of the per-pixel argmax over channels; blocks gradients.
    HardenChannels(NodeId),
    /// Mean over labeled pixels of `-log softmax(logits)[label]`.
    CrossEntropy { logits: NodeId, labels: String },
    /// Phase-consistency loss between a reference image and a translated image.
    PhaseLoss {
        reference: NodeId,
        translated: NodeId,
        opts: PhaseOpts,
    },
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::MaxPool2(_) => "maxpool2",
            Op::Upsample2(_) => "upsample2",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Log(_) => "log",
            Op::InstanceNorm(_) => "instance_norm",
            Op::SoftmaxChannels(_) => "softmax_channels",
            Op::LogSoftmaxChannels(_) => "log_softmax_channels",
            Op::ConcatChannels(..) => "concat_channels",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Detach(_) => "detach",
            Op::HardenChannels(_) => "harden_channels",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::PhaseLoss { .. } => "phase_loss",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Param { .. } | Op::Const(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::ConcatChannels(a, b) => {
                vec![*a, *b]
            }
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::PhaseLoss { reference, translated, .. } => vec![*reference, *translated],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::MaxPool2(a)
            | Op::Upsample2(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::LogSigmoid(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::Log(a)
            | Op::InstanceNorm(a)
            | Op::SoftmaxChannels(a)
            | Op::LogSoftmaxChannels(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Detach(a)
            | Op::HardenChannels(a) => vec![*a],
        }
    }
}

/// Values saved by forward for the adjoint rule.
#[derive(Debug, Clone, Default)]
enum Aux<T> {
    #[default]
    None,
    Argmax(Vec<u32>),
    InvStd(Vec<T>),
    Probs { probs: Vec<T>, count: usize },
    PhaseGrads { reference: Vec<T>, translated: Vec<T> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    requires_grad: bool,
    value: Option<Tensor<T>>,
    aux: Aux<T>,
}

/// Named tensors and label maps supplied to `forward`.
pub struct Bindings<'a, T> {
    tensors: HashMap<String, &'a Tensor<T>>,
    labels: HashMap<String, &'a [SegMask]>,
}

impl<T> Default for Bindings<'_, T> {
    fn default() -> Self {
        Self { tensors: HashMap::new(), labels: HashMap::new() }
    }
}

impl<'a, T: Scalar> Bindings<'a, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensor(mut self, name: impl Into<String>, value: &'a Tensor<T>) -> Self {
        self.tensors.insert(name.into(), value);
        self
    }

    pub fn set(&mut self, name: impl Into<String>, value: &'a Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn params(mut self, store: &'a ParamStore<T>) -> Self {
        for (name, t) in store.iter() {
            self.tensors.insert(name.clone(), t);
        }
        self
    }

    pub fn labels(mut self, name: impl Into<String>, masks: &'a [SegMask]) -> Self {
        self.labels.insert(name.into(), masks);
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor<T>> {
        self.tensors.get(name).copied()
    }

    pub fn get_labels(&self, name: &str) -> Option<&'a [SegMask]> {
        self.labels.get(name).copied()
    }

    pub(crate) fn tensor_entries(&self) -> impl Iterator<Item = (&String, &&'a Tensor<T>)> {
        self.tensors.iter()
    }

    pub(crate) fn label_entries(&self) -> impl Iterator<Item = (&String, &&'a [SegMask])> {
        self.labels.iter()
    }
}

/// Gradients of differentiable leaves, keyed by leaf name.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaves: HashMap<String, NodeId>,
}

type NodeResult<T> = Result<(Tensor<T>, Aux<T>), GraphError>;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaves: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op<T> {
        &self.nodes[id.0].op
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op<T>) -> NodeId {
        let requires_grad = match &op {
            Op::Param { trainable, .. } => *trainable,
            Op::Input { .. } | Op::Const(_) | Op::Detach(_) | Op::HardenChannels(_) => false,
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node { op, requires_grad, value: None, aux: Aux::None });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, name: &str, op: Op<T>, requires_grad: bool) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let id = self.push(op);
        self.nodes[id.0].requires_grad = requires_grad;
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// Non-differentiable named input. Repeated names share one node.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.leaf(name, Op::Input { name: name.to_string() }, false)
    }

    /// Named input whose gradient `backward` reports.
    pub fn input_with_grad(&mut self, name: &str) -> NodeId {
        self.leaf(name, Op::Input { name: name.to_string() }, true)
    }

    /// Named parameter leaf. Frozen (`trainable == false`) parameters receive no gradient.
    pub fn param(&mut self, name: &str, trainable: bool) -> NodeId {
        self.leaf(name, Op::Param { name: name.to_string(), trainable }, trainable)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::AddScalar(a, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        self.push(Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> NodeId {
        self.push(Op::ConvTranspose2d { x, w, b, stride, pad, output_pad })
    }

    pub fn maxpool2(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MaxPool2(x))
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Upsample2(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.push(Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid(x))
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::LogSigmoid(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Abs(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Square(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Log(x))
    }

    pub fn instance_norm(&mut self, x: NodeId) -> NodeId {
        self.push(Op::InstanceNorm(x))
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SoftmaxChannels(x))
    }

    pub fn log_softmax_channels(&mut self, x: NodeId) -> NodeId {
        self.push(Op::LogSoftmaxChannels(x))
    }

    /// Same value as `x`, but gradients stop here.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Detach(x))
    }

    /// One-hot argmax over channels of an `[N, C, H, W]` node; gradients stop here.
    pub fn harden_channels(&mut self, x: NodeId) -> NodeId {
        self.push(Op::HardenChannels(x))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ConcatChannels(a, b))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: &str) -> NodeId {
        self.push(Op::CrossEntropy { logits, labels: labels.to_string() })
    }

    pub fn phase_loss(&mut self, reference: NodeId, translated: NodeId, opts: PhaseOpts) -> NodeId {
        self.push(Op::PhaseLoss { reference, translated, opts })
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes.get(id.0).and_then(|n| n.value.as_ref())
    }

    /// Every node's value after a successful `forward`.
    pub fn values(&self) -> BTreeMap<NodeId, &Tensor<T>> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.value.as_ref().map(|v| (NodeId(i), v)))
            .collect()
    }

    /// Names of leaves that `backward` reports gradients for.
    pub fn grad_leaves(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .leaves
            .iter()
            .filter(|(_, id)| self.nodes[id.0].requires_grad)
            .map(|(n, _)| n.clone())
            .collect();
        names.sort();
        names
    }

    /// Evaluate every node in construction order.
    pub fn forward(&mut self, bindings: &Bindings<T>) -> Result<(), GraphError> {
        for node in &mut self.nodes {
            node.value = None;
            node.aux = Aux::None;
        }
        for i in 0..self.nodes.len() {
            let (value, aux) = self.eval(i, bindings)?;
            if !value.all_finite() {
                return Err(GraphError::NonFinite { node: i, op: self.nodes[i].op.name() });
            }
            self.nodes[i].value = Some(value);
            self.nodes[i].aux = aux;
        }
        Ok(())
    }

    /// Forward, then return the (scalar) value of `out`.
    pub fn eval_scalar(&mut self, bindings: &Bindings<T>, out: NodeId) -> Result<T, GraphError> {
        self.forward(bindings)?;
        let v = self.value(out).ok_or(GraphError::NotEvaluated)?;
        if !v.is_scalar() {
            return Err(GraphError::NonScalarLoss { node: out.0, shape: v.shape().to_vec() });
        }
        Ok(v.item())
    }

    fn val(&self, id: NodeId) -> &Tensor<T> {
        self.nodes[id.0].value.as_ref().expect("inputs evaluate before their consumers")
    }

    fn shape_err(&self, node: usize, detail: String) -> GraphError {
        GraphError::Shape { node, op: self.nodes[node].op.name(), detail }
    }

    fn nchw(&self, node: usize, t: &Tensor<T>) -> Result<[usize; 4], GraphError> {
        match *t.shape() {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(self.shape_err(node, format!("expected NCHW input, got {s:?}"))),
        }
    }

    fn same_shape(&self, node: usize, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), GraphError> {
        if a.shape() != b.shape() {
            return Err(self.shape_err(node, format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape())));
        }
        Ok(())
    }

    fn unary(x: &Tensor<T>, f: impl Fn(T) -> T) -> NodeResult<T> {
        Ok((x.map(f), Aux::None))
    }

    fn eval(&self, i: usize, bindings: &Bindings<T>) -> NodeResult<T> {
        let c = |v: f64| T::from_f64_lossy(v);
        match &self.nodes[i].op {
            Op::Input { name } | Op::Param { name, .. } => {
                let t = bindings.get(name).ok_or_else(|| GraphError::Unbound(name.clone()))?;
                Ok(((*t).clone(), Aux::None))
            }
            Op::Const(t) => Ok((t.clone(), Aux::None)),
            Op::Detach(a) => Ok((self.val(*a).clone(), Aux::None)),
            Op::HardenChannels(a) => {
                let x = self.val(*a);
                let [n, ch, h, w] = self.nchw(i, x)?;
                let plane = h * w;
                let mut y = vec![T::zero(); x.numel()];
                for s in 0..n {
                    for p in 0..plane {
                        let at = |c: usize| (s * ch + c) * plane + p;
                        // first maximum wins, matching argmax prediction
                        let best = (1..ch).fold(0, |b, c| if x.data()[at(c)] > x.data()[at(b)] { c } else { b });
                        y[at(best)] = T::one();
                    }
                }
                Ok((Tensor::from_parts(x.shape().to_vec(), y), Aux::None))
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                self.same_shape(i, x, y)?;
                let f: fn(T, T) -> T = match &self.nodes[i].op {
                    Op::Add(..) => |p, q| p + q,
                    Op::Sub(..) => |p, q| p - q,
                    _ => |p, q| p * q,
                };
                let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
                Ok((Tensor::from_parts(x.shape().to_vec(), data), Aux::None))
            }
            Op::Scale(a, s) => {
                let s = c(*s);
                Self::unary(self.val(*a), |v| v * s)
            }
            Op::AddScalar(a, s) => {
                let s = c(*s);
                Self::unary(self.val(*a), |v| v + s)
            }
            Op::MatMul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let (m, k, k2, n) = match (x.shape(), y.shape()) {
                    ([m, k], [k2, n]) => (*m, *k, *k2, *n),
                    (s1, s2) => return Err(self.shape_err(i, format!("matmul needs 2-D operands, got {s1:?} and {s2:?}"))),
                };
                if k != k2 {
                    return Err(self.shape_err(i, format!("inner extents {k} and {k2} differ")));
                }
                let mut out = vec![T::zero(); m * n];
                gemm(m, k, n, x.data(), false, y.data(), false, T::zero(), &mut out);
                Ok((Tensor::from_parts(vec![m, n], out), Aux::None))
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let [n, ci, h, wd] = self.nchw(i, xv)?;
                let (co, kh, kw) = match *wv.shape() {
                    [co, wci, kh, kw] if wci == ci => (co, kh, kw),
                    ref s => return Err(self.shape_err(i, format!("weight {s:?} incompatible with {ci} input channels"))),
                };
                let g = ConvGeom::new(ci, h, wd, kh, kw, *stride, *pad)
                    .ok_or_else(|| self.shape_err(i, format!("kernel {kh}x{kw} does not fit {h}x{wd} with pad {pad}")))?;
                let bias = self.bias(i, *b, co)?;
                let y = kernels::conv2d_forward(xv.data(), n, &g, wv.data(), co, bias);
                Ok((Tensor::from_parts(vec![n, co, g.out_h, g.out_w], y), Aux::None))
            }
            Op::ConvTranspose2d { x, w, b, stride, pad, output_pad } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let [n, ci, h, wd] = self.nchw(i, xv)?;
                let (co, kh, kw) = match *wv.shape() {
                    [wci, co, kh, kw] if wci == ci => (co, kh, kw),
                    ref s => return Err(self.shape_err(i, format!("weight {s:?} incompatible with {ci} input channels"))),
                };
                if *output_pad >= *stride {
                    return Err(self.shape_err(i, "output padding must be below the stride".into()));
                }
                let oh = ((h - 1) * stride + kh + output_pad).checked_sub(2 * pad);
                let ow = ((wd - 1) * stride + kw + output_pad).checked_sub(2 * pad);
                let (oh, ow) = match (oh, ow) {
                    (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
                    _ => return Err(self.shape_err(i, "padding exceeds transposed output".into())),
                };
                let g = ConvGeom::new(co, oh, ow, kh, kw, *stride, *pad)
                    .filter(|g| g.out_h == h && g.out_w == wd)
                    .ok_or_else(|| self.shape_err(i, "inconsistent transposed geometry".into()))?;
                let bias = self.bias(i, *b, co)?;
                let y = kernels::conv_transpose_forward(xv.data(), n, ci, &g, wv.data(), bias);
                Ok((Tensor::from_parts(vec![n, co, oh, ow], y), Aux::None))
            }
            Op::MaxPool2(a) => {
                let x = self.val(*a);
                let [n, ch, h, w] = self.nchw(i, x)?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(self.shape_err(i, format!("2x2 pooling needs even extents, got {h}x{w}")));
                }
                let (y, idx) = kernels::maxpool2_forward(x.data(), n * ch, h, w);
                Ok((Tensor::from_parts(vec![n, ch, h / 2, w / 2], y), Aux::Argmax(idx)))
            }
            Op::Upsample2(a) => {
                let x = self.val(*a);
                let [n, ch, h, w] = self.nchw(i, x)?;
                let y = kernels::upsample2_forward(x.data(), n * ch, h, w);
                Ok((Tensor::from_parts(vec![n, ch, 2 * h, 2 * w], y), Aux::None))
            }
            Op::Relu(a) => Self::unary(self.val(*a), |v| v.max(T::zero())),
            Op::LeakyRelu(a, s) => {
                let s = c(*s);
                Self::unary(self.val(*a), |v| if v > T::zero() { v } else { v * s })
            }
            Op::Tanh(a) => Self::unary(self.val(*a), |v| v.tanh()),
            Op::Sigmoid(a) => Self::unary(self.val(*a), sigmoid),
            Op::LogSigmoid(a) => Self::unary(self.val(*a), |v| -softplus(-v)),
            Op::Abs(a) => Self::unary(self.val(*a), |v| v.abs()),
            Op::Square(a) => Self::unary(self.val(*a), |v| v * v),
            Op::Log(a) => {
                let x = self.val(*a);
                if x.data().iter().any(|&v| v <= T::zero()) {
                    return Err(GraphError::Invalid { node: i, op: "log", detail: "non-positive argument".into() });
                }
                Self::unary(x, |v| v.ln())
            }
            Op::InstanceNorm(a) => {
                let x = self.val(*a);
                let [n, ch, h, w] = self.nchw(i, x)?;
                let (y, inv) = kernels::instance_norm_forward(x.data(), n * ch, h * w, c(1e-5));
                Ok((Tensor::from_parts(x.shape().to_vec(), y), Aux::InvStd(inv)))
            }
            Op::SoftmaxChannels(a) | Op::LogSoftmaxChannels(a) => {
                let x = self.val(*a);
                let [n, ch, h, w] = self.nchw(i, x)?;
                let log = matches!(self.nodes[i].op, Op::LogSoftmaxChannels(_));
                let y = kernels::softmax_channels(x.data(), n, ch, h * w, log);
                Ok((Tensor::from_parts(x.shape().to_vec(), y), Aux::None))
            }
            Op::ConcatChannels(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let [n, c1, h, w] = self.nchw(i, x)?;
                let [n2, c2, h2, w2] = self.nchw(i, y)?;
                if (n, h, w) != (n2, h2, w2) {
                    return Err(self.shape_err(i, format!("cannot concat {:?} with {:?}", x.shape(), y.shape())));
                }
                let (p1, p2) = (c1 * h * w, c2 * h * w);
                let mut out = Vec::with_capacity(n * (p1 + p2));
                for s in 0..n {
                    out.extend_from_slice(&x.data()[s * p1..(s + 1) * p1]);
                    out.extend_from_slice(&y.data()[s * p2..(s + 1) * p2]);
                }
                Ok((Tensor::from_parts(vec![n, c1 + c2, h, w], out), Aux::None))
            }
            Op::Sum(a) => Ok((Tensor::scalar(self.val(*a).sum()), Aux::None)),
            Op::Mean(a) => {
                let x = self.val(*a);
                Ok((Tensor::scalar(x.sum() / T::from_usize(x.numel()).unwrap()), Aux::None))
            }
            Op::CrossEntropy { logits, labels } => self.eval_cross_entropy(i, *logits, labels, bindings),
            Op::PhaseLoss { reference, translated, opts } => {
                let (r, t) = (self.val(*reference), self.val(*translated));
                self.same_shape(i, r, t)?;
                let to64 = |v: &Tensor<T>| v.cast::<f64>();
                let out = spectral::phase_loss_tensor(&to64(r), &to64(t), opts.normalize, opts.eps)
                    .map_err(|e| self.shape_err(i, e.to_string()))?;
                let conv = |g: Vec<f64>| g.into_iter().map(c).collect::<Vec<T>>();
                Ok((
                    Tensor::scalar(c(out.loss)),
                    Aux::PhaseGrads { reference: conv(out.grad_reference), translated: conv(out.grad_translated) },
                ))
            }
        }
    }

    fn bias(&self, node: usize, b: Option<NodeId>, channels: usize) -> Result<Option<&[T]>, GraphError> {
        match b {
            None => Ok(None),
            Some(b) => {
                let bv = self.val(b);
                if bv.numel() != channels {
                    return Err(self.shape_err(node, format!("bias has {} entries for {channels} channels", bv.numel())));
                }
                Ok(Some(bv.data()))
            }
        }
    }

    fn eval_cross_entropy(&self, i: usize, logits: NodeId, labels: &str, bindings: &Bindings<T>) -> NodeResult<T> {
        let x = self.val(logits);
        let [n, k, h, w] = self.nchw(i, x)?;
        let masks = bindings.get_labels(labels).ok_or_else(|| GraphError::UnboundLabels(labels.to_string()))?;
        if masks.len() != n {
            return Err(self.shape_err(i, format!("{} label maps for batch of {n}", masks.len())));
        }
        let invalid = |detail: String| GraphError::Invalid { node: i, op: "cross_entropy", detail };
        let plane = h * w;
        let mut probs = kernels::softmax_channels(x.data(), n, k, plane, false);
        let logp = kernels::softmax_channels(x.data(), n, k, plane, true);
        let mut total = T::zero();
        let mut count = 0usize;
        for (s, m) in masks.iter().enumerate() {
            m.check_size(h, w).map_err(|e| invalid(e.to_string()))?;
            m.validate(k).map_err(|e| invalid(e.to_string()))?;
            for (p, &lbl) in m.values().iter().enumerate() {
                let base = s * k * plane + p;
                if lbl == IGNORE {
                    for ch in 0..k {
                        probs[base + ch * plane] = T::zero();
                    }
                    continue;
                }
                total -= logp[base + lbl as usize * plane];
                probs[base + lbl as usize * plane] -= T::one();
                count += 1;
            }
        }
        if count == 0 {
            return Err(invalid("every pixel is ignored".into()));
        }
        let loss = total / T::from_usize(count).unwrap();
        Ok((Tensor::scalar(loss), Aux::Probs { probs, count }))
    }

    /// Reverse sweep from a scalar loss. Returns gradients of every differentiable leaf
    /// reachable from the loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, GraphError> {
        let lv = self.value(loss).ok_or(GraphError::NotEvaluated)?;
        if !lv.is_scalar() {
            return Err(GraphError::NonScalarLoss { node: loss.0, shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        let mut out = Gradients::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input { name } | Op::Param { name, .. } => {
                    out.insert(name.clone(), g);
                }
                _ => self.propagate(i, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let c = |v: f64| T::from_f64_lossy(v);
        let node = &self.nodes[i];
        let y = node.value.as_ref().expect("forward ran");
        let like = |t: &Tensor<T>, data: Vec<T>| Tensor::from_parts(t.shape().to_vec(), data);
        let zip_map = |a: &Tensor<T>, f: &dyn Fn(T, T) -> T| -> Vec<T> {
            a.data().iter().zip(g.data()).map(|(&v, &gv)| f(v, gv)).collect()
        };
        match &node.op {
            Op::Input { .. } | Op::Param { .. } | Op::Const(_) | Op::Detach(_) | Op::HardenChannels(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, like(av, zip_map(bv, &|q, gv| q * gv)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, like(bv, zip_map(av, &|p, gv| p * gv)));
                }
            }
            Op::Scale(a, s) => {
                let s = c(*s);
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::AddScalar(a, _) => self.accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, T::zero(), &mut da);
                    self.accumulate(grads, *a, like(av, da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, T::zero(), &mut db);
                    self.accumulate(grads, *b, like(bv, db));
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let [n, ci, h, wd] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
                let (co, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
                let geom = ConvGeom::new(ci, h, wd, kh, kw, *stride, *pad).expect("validated in forward");
                let need_b = b.is_some_and(|b| self.wants(b));
                let r = kernels::conv2d_backward(xv.data(), n, &geom, wv.data(), co, g.data(), self.wants(*x), self.wants(*w), need_b);
                self.route_conv(grads, (*x, xv), (*w, wv), *b, r);
            }
            Op::ConvTranspose2d { x, w, b, stride, pad, .. } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (n, ci) = (xv.shape()[0], xv.shape()[1]);
                let (co, kh, kw) = (wv.shape()[1], wv.shape()[2], wv.shape()[3]);
                let geom = ConvGeom::new(co, y.shape()[2], y.shape()[3], kh, kw, *stride, *pad).expect("validated in forward");
                let need_b = b.is_some_and(|b| self.wants(b));
                let r = kernels::conv_transpose_backward(xv.data(), n, ci, &geom, wv.data(), g.data(), self.wants(*x), self.wants(*w), need_b);
                self.route_conv(grads, (*x, xv), (*w, wv), *b, r);
            }
            Op::MaxPool2(a) => {
                let av = self.val(*a);
                let Aux::Argmax(idx) = &node.aux else { unreachable!("maxpool saves argmax") };
                let mut dx = vec![T::zero(); av.numel()];
                for (&j, &gv) in idx.iter().zip(g.data()) {
                    dx[j as usize] += gv;
                }
                self.accumulate(grads, *a, like(av, dx));
            }
            Op::Upsample2(a) => {
                let av = self.val(*a);
                let s = av.shape();
                let dx = kernels::upsample2_backward(g.data(), s[0] * s[1], s[2], s[3]);
                self.accumulate(grads, *a, like(av, dx));
            }
            Op::Relu(a) => {
                let d = zip_map(y, &|v, gv| if v > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *a, like(y, d));
            }
            Op::LeakyRelu(a, s) => {
                let s = c(*s);
                let d = zip_map(self.val(*a), &|v, gv| if v > T::zero() { gv } else { gv * s });
                self.accumulate(grads, *a, like(y, d));
            }
            Op::Tanh(a) => {
                let d = zip_map(y, &|v, gv| gv * (T::one() - v * v));
                self.accumulate(grads, *a, like(y, d));
            }
            Op::Sigmoid(a) => {
                let d = zip_map(y, &|v, gv| gv * v * (T::one() - v));
                self.accumulate(grads, *a, like(y, d));
            }
            Op::LogSigmoid(a) => {
                let d = zip_map(self.val(*a), &|v, gv| gv * sigmoid(-v));
                self.accumulate(grads, *a, like(y, d));
            }
            Op::Abs(a) => {
                let d = zip_map(self.val(*a), &|v, gv| {
                    if v > T::zero() {
                        gv
                    } else if v < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *a, like(y, d));
            }
            Op::Square(a) => {
                let two = c(2.0);
                let d = zip_map(self.val(*a), &|v, gv| two * v * gv);
                self.accumulate(grads, *a, like(y, d));
            }
            Op::Log(a) => {
                let d = zip_map(self.val(*a), &|v, gv| gv / v);
                self.accumulate(grads, *a, like(y, d));
            }
            Op::InstanceNorm(a) => {
                let Aux::InvStd(inv) = &node.aux else { unreachable!("instance norm saves inv std") };
                let s = y.shape();
                let dx = kernels::instance_norm_backward(y.data(), inv, g.data(), s[2] * s[3]);
                self.accumulate(grads, *a, like(y, dx));
            }
            Op::SoftmaxChannels(a) | Op::LogSoftmaxChannels(a) => {
                let log = matches!(node.op, Op::LogSoftmaxChannels(_));
                let s = y.shape();
                let (n, k, plane) = (s[0], s[1], s[2] * s[3]);
                let mut dx = vec![T::zero(); y.numel()];
                for b in 0..n {
                    for p in 0..plane {
                        let at = |ch: usize| b * k * plane + ch * plane + p;
                        if log {
                            let gs: T = (0..k).map(|ch| g.data()[at(ch)]).sum();
                            for ch in 0..k {
                                dx[at(ch)] = g.data()[at(ch)] - y.data()[at(ch)].exp() * gs;
                            }
                        } else {
                            let dot: T = (0..k).map(|ch| g.data()[at(ch)] * y.data()[at(ch)]).sum();
                            for ch in 0..k {
                                dx[at(ch)] = y.data()[at(ch)] * (g.data()[at(ch)] - dot);
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, like(y, dx));
            }
            Op::ConcatChannels(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let n = av.shape()[0];
                let (p1, p2) = (av.numel() / n, bv.numel() / n);
                let (mut da, mut db) = (Vec::with_capacity(av.numel()), Vec::with_capacity(bv.numel()));
                for s in 0..n {
                    let chunk = &g.data()[s * (p1 + p2)..(s + 1) * (p1 + p2)];
                    da.extend_from_slice(&chunk[..p1]);
                    db.extend_from_slice(&chunk[p1..]);
                }
                self.accumulate(grads, *a, like(av, da));
                self.accumulate(grads, *b, like(bv, db));
            }
            Op::Sum(a) => {
                let av = self.val(*a);
                self.accumulate(grads, *a, Tensor::full(av.shape(), g.item()));
            }
            Op::Mean(a) => {
                let av = self.val(*a);
                let scale = g.item() / T::from_usize(av.numel()).unwrap();
                self.accumulate(grads, *a, Tensor::full(av.shape(), scale));
            }
            Op::CrossEntropy { logits, .. } => {
                let Aux::Probs { probs, count } = &node.aux else { unreachable!("cross entropy saves probs") };
                let scale = g.item() / T::from_usize(*count).unwrap();
                let lv = self.val(*logits);
                self.accumulate(grads, *logits, like(lv, probs.iter().map(|&p| p * scale).collect()));
            }
            Op::PhaseLoss { reference, translated, .. } => {
                let Aux::PhaseGrads { reference: gr, translated: gt } = &node.aux else {
                    unreachable!("phase loss saves gradients")
                };
                let s = g.item();
                if self.wants(*reference) {
                    let rv = self.val(*reference);
                    self.accumulate(grads, *reference, like(rv, gr.iter().map(|&v| v * s).collect()));
                }
                if self.wants(*translated) {
                    let tv = self.val(*translated);
                    self.accumulate(grads, *translated, like(tv, gt.iter().map(|&v| v * s).collect()));
                }
            }
        }
    }

    fn route_conv(
        &self,
        grads: &mut [Option<Tensor<T>>],
        (x, xv): (NodeId, &Tensor<T>),
        (w, wv): (NodeId, &Tensor<T>),
        b: Option<NodeId>,
        r: kernels::ConvGrads<T>,
    ) {
        if let Some(dx) = r.dx {
            self.accumulate(grads, x, Tensor::from_parts(xv.shape().to_vec(), dx));
        }
        if let Some(dw) = r.dw {
            self.accumulate(grads, w, Tensor::from_parts(wv.shape().to_vec(), dw));
        }
        if let (Some(b), Some(db)) = (b, r.db) {
            let shape = self.val(b).shape().to_vec();
            self.accumulate(grads, b, Tensor::from_parts(shape, db));
        }
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(v: T) -> T {
    // log(1 + e^v) without overflow
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_graph_returns_binding() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x");
        let v = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        g.forward(&Bindings::new().tensor("x", &v)).unwrap();
        assert_eq!(g.value(x).unwrap(), &v);
    }

    #[test]
    fn sum_of_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x");
        let s = g.sum(x);
        let v = Tensor::full(&[2, 2], 1.0);
        assert_eq!(g.eval_scalar(&Bindings::new().tensor("x", &v), s).unwrap(), 4.0);
    }

    #[test]
    fn relu_conv_hand_oracle() {
        // x = 3x3 ramp 0..8, k = 2x2 ones: windows sum to 8, 12, 20, 24.
        // Subtract 10 so the relu clamps the first window.
        let mut g = Graph::<f64>::new();
        let x = g.input("x");
        let k = g.input("k");
        let y = g.conv2d(x, k, None, 1, 0);
        let shifted = g.add_scalar(y, -10.0);
        let r = g.relu(shifted);
        let xv = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64);
        let kv = Tensor::full(&[1, 1, 2, 2], 1.0);
        g.forward(&Bindings::new().tensor("x", &xv).tensor("k", &kv)).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[8.0, 12.0, 20.0, 24.0]);
        assert_eq!(g.value(r).unwrap().data(), &[0.0, 2.0, 10.0, 14.0]);
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.input_with_grad("x");
        let s = g.sum(x);
        let v = t(&[3], &[0.3, -2.0, 7.0]);
        g.forward(&Bindings::new().tensor("x", &v)).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["x"].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_of_square_product() {
        let mut g = Graph::<f64>::new();
        let x = g.input_with_grad("x");
        let p = g.mul(x, x);
        let v = Tensor::scalar(3.0);
        g.forward(&Bindings::new().tensor("x", &v)).unwrap();
        assert_eq!(g.backward(p).unwrap()["x"].item(), 6.0);
    }

    #[test]
    fn duplicated_subgraph_doubles_gradient() {
        let xv = t(&[1, 1, 3, 3], &[0.1, -0.4, 0.7, 0.2, 0.9, -0.3, 0.5, 0.6, -0.8]);
        let wv = t(&[1, 1, 2, 2], &[0.3, -0.2, 0.5, 0.1]);
        let grad = |twice: bool| {
            let mut g = Graph::<f64>::new();
            let x = g.input("x");
            let w = g.param("w", true);
            let y = g.conv2d(x, w, None, 1, 0);
            let a = g.tanh(y);
            let s1 = g.sum(a);
            let out = if twice {
                let y2 = g.conv2d(x, w, None, 1, 0);
                let a2 = g.tanh(y2);
                let s2 = g.sum(a2);
                g.add(s1, s2)
            } else {
                s1
            };
            g.forward(&Bindings::new().tensor("x", &xv).tensor("w", &wv)).unwrap();
            g.backward(out).unwrap().remove("w").unwrap()
        };
        let (one, two) = (grad(false), grad(true));
        for (a, b) in one.data().iter().zip(two.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn errors_are_structured() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a");
        let b = g.input("b");
        let s = g.add(a, b);
        let av = Tensor::zeros(&[2]);
        let bv = Tensor::zeros(&[3]);
        assert_eq!(g.forward(&Bindings::new().tensor("a", &av)), Err(GraphError::Unbound("b".into())));
        let err = g.forward(&Bindings::new().tensor("a", &av).tensor("b", &bv)).unwrap_err();
        assert!(matches!(err, GraphError::Shape { node: 2, op: "add", .. }));
        assert_eq!(g.backward(s), Err(GraphError::NotEvaluated));
        g.forward(&Bindings::new().tensor("a", &av).tensor("b", &av)).unwrap();
        assert!(matches!(g.backward(s), Err(GraphError::NonScalarLoss { .. })));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a");
        let _ = g.scale(a, 1e308);
        let big = Tensor::scalar(1e10);
        assert!(matches!(g.forward(&Bindings::new().tensor("a", &big)), Err(GraphError::NonFinite { .. })));
    }

    #[test]
    fn cross_entropy_rejects_fully_ignored() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x");
        let _ = g.cross_entropy(x, "y");
        let logits = Tensor::zeros(&[1, 2, 1, 2]);
        let masks = [SegMask::filled(1, 2, IGNORE)];
        let err = g.forward(&Bindings::new().tensor("x", &logits).labels("y", &masks)).unwrap_err();
        assert!(matches!(err, GraphError::Invalid { op: "cross_entropy", .. }));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut g = Graph::<f32>::new();
        let x = g.input("x");
        let w = g.param("w", true);
        let y = g.conv2d(x, w, None, 2, 1);
        let n = g.instance_norm(y);
        let _ = g.softmax_channels(n);
        let xv = Tensor::from_fn(&[1, 2, 8, 8], |i| (i as f32 * 0.37).sin());
        let wv = Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f32 * 0.11).cos());
        let b = Bindings::new().tensor("x", &xv).tensor("w", &wv);
        g.forward(&b).unwrap();
        let first: Vec<Tensor<f32>> = g.values().values().map(|t| (*t).clone()).collect();
        g.forward(&b).unwrap();
        let second: Vec<Tensor<f32>> = g.values().values().map(|t| (*t).clone()).collect();
        assert_eq!(first, second);
    }
}
