//! Differentiable tensor engine with a define-by-run graph.
//!
//! Every backward rule is expressed through the same recorded ops, so the
//! output of [`grad`] with `create_graph = true` is itself differentiable.
//! That property is what lets an attack objective contain a full gradient
//! computation and still be minimized by a first-order optimizer.
//!
//! A [`Graph`] and the tensors attached to it are confined to one thread
//! (`Rc` interior). Detached values travel between threads as [`TensorData`].

mod backward;
mod kernels;

pub use kernels::{ConvDims, ConvMode};

use crate::error::TensorError;
use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

type Result<T> = std::result::Result<T, TensorError>;

/// Plain shaped value: the detached, shareable form of a tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Default for TensorData {
    fn default() -> Self {
        Self::zeros(&[0])
    }
}

impl TensorData {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub(crate) fn new_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new_unchecked(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new_unchecked(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new_unchecked(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

type NodeId = usize;

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: TensorData,
    requires_grad: bool,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddScalar,
    Scale(f64),
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Abs,
    Matmul,
    MatmulNT,
    Transpose,
    Reshape { from: Vec<usize> },
    SumAll,
    BroadcastScalar,
    SumAxis0,
    RepeatAxis0,
    SumAxis1,
    RepeatAxis1,
    SumChannels,
    BroadcastChannels,
    AvgPool2d { k: usize },
    AvgUnpool2d { k: usize },
    Conv2d { stride: usize, pad: usize },
    ConvGradInput { stride: usize, pad: usize },
    ConvGradWeight { stride: usize, pad: usize },
    DiffRows,
    DiffRowsAdjoint,
    DiffCols,
    DiffColsAdjoint,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::AddScalar => "add_scalar",
            Op::Scale(_) => "scale",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Abs => "abs",
            Op::Matmul => "matmul",
            Op::MatmulNT => "matmul_nt",
            Op::Transpose => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::SumAll => "sum_all",
            Op::BroadcastScalar => "broadcast_scalar",
            Op::SumAxis0 => "sum_axis0",
            Op::RepeatAxis0 => "repeat_axis0",
            Op::SumAxis1 => "sum_axis1",
            Op::RepeatAxis1 => "repeat_axis1",
            Op::SumChannels => "sum_channels",
            Op::BroadcastChannels => "broadcast_channels",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::AvgUnpool2d { .. } => "avg_unpool2d",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvGradInput { .. } => "conv2d_grad_input",
            Op::ConvGradWeight { .. } => "conv2d_grad_weight",
            Op::DiffRows => "diff_rows",
            Op::DiffRowsAdjoint => "diff_rows_adjoint",
            Op::DiffCols => "diff_cols",
            Op::DiffColsAdjoint => "diff_cols_adjoint",
        }
    }
}

struct GraphInner {
    nodes: Vec<Node>,
    generation: u64,
    recording: bool,
}

/// Append-only computation graph. Node indices are a topological order by
/// construction, which is what the backward pass relies on.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                generation: 0,
                recording: true,
            })),
        }
    }

    /// Drop all nodes and bump the generation; tensors recorded before the
    /// reset become stale and are rejected by later ops.
    pub fn reset(&self) {
        let mut g = self.inner.borrow_mut();
        g.nodes.clear();
        g.generation += 1;
        g.recording = true;
    }

    pub fn generation(&self) -> u64 {
        self.inner.borrow().generation
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push_node(&self, node: Node) -> NodeId {
        let mut g = self.inner.borrow_mut();
        g.nodes.push(node);
        g.nodes.len() - 1
    }

    /// New leaf tensor recorded on this graph.
    pub fn leaf(&self, value: &TensorData, requires_grad: bool) -> Result<Tensor> {
        if !value.is_finite() {
            return Err(TensorError::NumericFault { op: "leaf" });
        }
        let id = self.push_node(Node {
            op: Op::Leaf,
            inputs: vec![],
            value: value.clone(),
            requires_grad,
        });
        Ok(Tensor {
            value: value.clone(),
            node: Some(NodeRef {
                graph: self.clone(),
                id,
                generation: self.generation(),
            }),
            requires_grad,
        })
    }

    pub fn constant(&self, value: &TensorData) -> Result<Tensor> {
        self.leaf(value, false)
    }

    pub(crate) fn set_recording(&self, on: bool) -> bool {
        let mut g = self.inner.borrow_mut();
        std::mem::replace(&mut g.recording, on)
    }

    fn recording(&self) -> bool {
        self.inner.borrow().recording
    }

    fn node_value(&self, id: NodeId) -> TensorData {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn node_requires_grad(&self, id: NodeId) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    fn tensor_handle(&self, id: NodeId) -> Tensor {
        Tensor {
            value: self.node_value(id),
            node: Some(NodeRef {
                graph: self.clone(),
                id,
                generation: self.generation(),
            }),
            requires_grad: self.node_requires_grad(id),
        }
    }
}

#[derive(Clone)]
struct NodeRef {
    graph: Graph,
    id: NodeId,
    generation: u64,
}

/// N-dimensional array of `f64` that may be attached to a computation graph.
#[derive(Clone)]
pub struct Tensor {
    value: TensorData,
    node: Option<NodeRef>,
    requires_grad: bool,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.value.shape)
            .field("attached", &self.node.is_some())
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// Detached constant tensor.
    pub fn from_data(value: TensorData) -> Self {
        Self {
            value,
            node: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_data(TensorData::scalar(v))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_data(TensorData::zeros(shape))
    }

    pub fn shape(&self) -> &[usize] {
        &self.value.shape
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn values(&self) -> &[f64] {
        self.value.values()
    }

    pub fn data(&self) -> &TensorData {
        &self.value
    }

    pub fn to_data(&self) -> TensorData {
        self.value.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// Copy of this tensor with no graph attachment.
    pub fn detach(&self) -> Tensor {
        Tensor::from_data(self.value.clone())
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalarOutput {
                numel: self.numel(),
            });
        }
        Ok(self.values()[0])
    }

    fn node_ref(&self) -> Option<&NodeRef> {
        self.node.as_ref()
    }

    // ---- op plumbing ------------------------------------------------------

    /// Resolve the active graph among operands, validating generation and
    /// identity. Returns `None` when every operand is detached.
    fn active_graph(op: &'static str, operands: &[&Tensor]) -> Result<Option<Graph>> {
        let mut found: Option<Graph> = None;
        for t in operands {
            if let Some(nr) = t.node_ref() {
                if nr.generation != nr.graph.generation() {
                    return Err(TensorError::StaleTensor { op });
                }
                match &found {
                    None => found = Some(nr.graph.clone()),
                    Some(g) => {
                        if !g.same_graph(&nr.graph) {
                            return Err(TensorError::GraphMismatch { op });
                        }
                    }
                }
            }
        }
        Ok(found)
    }

    fn record(op: Op, operands: &[&Tensor], out: TensorData) -> Result<Tensor> {
        if !out.is_finite() {
            return Err(TensorError::NumericFault { op: op.name() });
        }
        let graph = Tensor::active_graph(op.name(), operands)?;
        let graph = match graph {
            Some(g) if g.recording() => g,
            _ => return Ok(Tensor::from_data(out)),
        };
        let mut input_ids = Vec::with_capacity(operands.len());
        let mut requires = false;
        for t in operands {
            let id = match t.node_ref() {
                Some(nr) => nr.id,
                // Lift detached operands to constant leaves so backward can
                // address every input by node id.
                None => graph.push_node(Node {
                    op: Op::Leaf,
                    inputs: vec![],
                    value: t.value.clone(),
                    requires_grad: false,
                }),
            };
            requires |= t.requires_grad;
            input_ids.push(id);
        }
        let id = graph.push_node(Node {
            op,
            inputs: input_ids,
            value: out.clone(),
            requires_grad: requires,
        });
        Ok(Tensor {
            value: out,
            node: Some(NodeRef {
                generation: graph.generation(),
                graph,
                id,
            }),
            requires_grad: requires,
        })
    }

    fn same_shape(&self, op: &'static str, rhs: &Tensor) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&self, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> TensorData {
        let data = self
            .values()
            .iter()
            .zip(rhs.values())
            .map(|(&a, &b)| f(a, b))
            .collect();
        TensorData::new_unchecked(self.shape().to_vec(), data)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> TensorData {
        let data = self.values().iter().map(|&a| f(a)).collect();
        TensorData::new_unchecked(self.shape().to_vec(), data)
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape("add", rhs)?;
        Tensor::record(Op::Add, &[self, rhs], self.zip(rhs, |a, b| a + b))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape("sub", rhs)?;
        Tensor::record(Op::Sub, &[self, rhs], self.zip(rhs, |a, b| a - b))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape("mul", rhs)?;
        Tensor::record(Op::Mul, &[self, rhs], self.zip(rhs, |a, b| a * b))
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape("div", rhs)?;
        Tensor::record(Op::Div, &[self, rhs], self.zip(rhs, |a, b| a / b))
    }

    pub fn neg(&self) -> Result<Tensor> {
        Tensor::record(Op::Neg, &[self], self.map(|a| -a))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        Tensor::record(Op::AddScalar, &[self], self.map(|a| a + c))
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        Tensor::record(Op::Scale(c), &[self], self.map(|a| a * c))
    }

    pub fn relu(&self) -> Result<Tensor> {
        Tensor::record(Op::Relu, &[self], self.map(|a| a.max(0.0)))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        Tensor::record(Op::Sigmoid, &[self], self.map(|a| 1.0 / (1.0 + (-a).exp())))
    }

    pub fn tanh(&self) -> Result<Tensor> {
        Tensor::record(Op::Tanh, &[self], self.map(f64::tanh))
    }

    pub fn exp(&self) -> Result<Tensor> {
        Tensor::record(Op::Exp, &[self], self.map(f64::exp))
    }

    pub fn log(&self) -> Result<Tensor> {
        Tensor::record(Op::Log, &[self], self.map(f64::ln))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        Tensor::record(Op::Sqrt, &[self], self.map(f64::sqrt))
    }

    pub fn abs(&self) -> Result<Tensor> {
        Tensor::record(Op::Abs, &[self], self.map(f64::abs))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let out = kernels::matmul(self.values(), rhs.values(), m, k, n);
        Tensor::record(
            Op::Matmul,
            &[self, rhs],
            TensorData::new_unchecked(vec![m, n], out),
        )
    }

    /// `self [m,k] @ rhs[n,k]^T -> [m,n]` without materializing a transpose.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[0]);
        let out = kernels::matmul_nt(self.values(), rhs.values(), m, k, n);
        Tensor::record(
            Op::MatmulNT,
            &[self, rhs],
            TensorData::new_unchecked(vec![m, n], out),
        )
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: s.to_vec(),
                detail: "expected 2-D".into(),
            });
        }
        let out = kernels::transpose(self.values(), s[0], s[1]);
        Tensor::record(
            Op::Transpose,
            &[self],
            TensorData::new_unchecked(vec![s[1], s[0]], out),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                detail: format!("incompatible with {} elements", self.numel()),
            });
        }
        let out = TensorData {
            shape: shape.to_vec(),
            data: Arc::clone(&self.value.data),
        };
        Tensor::record(
            Op::Reshape {
                from: self.shape().to_vec(),
            },
            &[self],
            out,
        )
    }

    // ---- reductions and broadcasts ----------------------------------------

    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f64 = self.values().iter().sum();
        Tensor::record(Op::SumAll, &[self], TensorData::scalar(s))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        self.sum_all()?.scale(1.0 / self.numel() as f64)
    }

    /// Scalar -> arbitrary shape.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Result<Tensor> {
        if self.numel() != 1 {
            return Err(TensorError::InvalidShape {
                op: "broadcast_scalar",
                shape: self.shape().to_vec(),
                detail: "expected single element".into(),
            });
        }
        let out = TensorData::full(shape, self.values()[0]);
        Tensor::record(Op::BroadcastScalar, &[self], out)
    }

    fn expect_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op,
                shape: s.to_vec(),
                detail: "expected 2-D".into(),
            });
        }
        Ok((s[0], s[1]))
    }

    /// [R,C] -> [C], summing rows.
    pub fn sum_axis0(&self) -> Result<Tensor> {
        let (r, c) = self.expect_2d("sum_axis0")?;
        let mut out = vec![0.0; c];
        for row in 0..r {
            for col in 0..c {
                out[col] += self.values()[row * c + col];
            }
        }
        Tensor::record(Op::SumAxis0, &[self], TensorData::new_unchecked(vec![c], out))
    }

    /// [C] -> [rows, C].
    pub fn repeat_axis0(&self, rows: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(TensorError::InvalidShape {
                op: "repeat_axis0",
                shape: s.to_vec(),
                detail: "expected 1-D".into(),
            });
        }
        let c = s[0];
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(self.values());
        }
        Tensor::record(
            Op::RepeatAxis0,
            &[self],
            TensorData::new_unchecked(vec![rows, c], out),
        )
    }

    /// [R,C] -> [R], summing columns.
    pub fn sum_axis1(&self) -> Result<Tensor> {
        let (r, c) = self.expect_2d("sum_axis1")?;
        let out: Vec<f64> = (0..r)
            .map(|row| self.values()[row * c..(row + 1) * c].iter().sum())
            .collect();
        Tensor::record(Op::SumAxis1, &[self], TensorData::new_unchecked(vec![r], out))
    }

    /// [R] -> [R, cols].
    pub fn repeat_axis1(&self, cols: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(TensorError::InvalidShape {
                op: "repeat_axis1",
                shape: s.to_vec(),
                detail: "expected 1-D".into(),
            });
        }
        let r = s[0];
        let mut out = Vec::with_capacity(r * cols);
        for &v in self.values() {
            out.extend(std::iter::repeat(v).take(cols));
        }
        Tensor::record(
            Op::RepeatAxis1,
            &[self],
            TensorData::new_unchecked(vec![r, cols], out),
        )
    }

    fn expect_4d(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(TensorError::InvalidShape {
                op,
                shape: s.to_vec(),
                detail: "expected NCHW".into(),
            });
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    /// NCHW -> [C], summing over batch and spatial dims.
    pub fn sum_channels(&self) -> Result<Tensor> {
        let (n, c, h, w) = self.expect_4d("sum_channels")?;
        let out = kernels::sum_channels(self.values(), n, c, h * w);
        Tensor::record(
            Op::SumChannels,
            &[self],
            TensorData::new_unchecked(vec![c], out),
        )
    }

    /// [C] -> NCHW shaped like `like_shape`.
    pub fn broadcast_channels(&self, like_shape: &[usize]) -> Result<Tensor> {
        if self.shape().len() != 1 || like_shape.len() != 4 || like_shape[1] != self.shape()[0] {
            return Err(TensorError::InvalidShape {
                op: "broadcast_channels",
                shape: self.shape().to_vec(),
                detail: format!("cannot broadcast to {:?}", like_shape),
            });
        }
        let (n, c, h, w) = (like_shape[0], like_shape[1], like_shape[2], like_shape[3]);
        let out = kernels::broadcast_channels(self.values(), n, c, h * w);
        Tensor::record(
            Op::BroadcastChannels,
            &[self],
            TensorData::new_unchecked(like_shape.to_vec(), out),
        )
    }

    // ---- spatial ops -------------------------------------------------------

    pub fn avg_pool2d(&self, k: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.expect_4d("avg_pool2d")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(TensorError::InvalidShape {
                op: "avg_pool2d",
                shape: self.shape().to_vec(),
                detail: format!("spatial dims not divisible by window {}", k),
            });
        }
        let out = kernels::avg_pool2d(self.values(), n, c, h, w, k);
        Tensor::record(
            Op::AvgPool2d { k },
            &[self],
            TensorData::new_unchecked(vec![n, c, h / k, w / k], out),
        )
    }

    /// Adjoint of `avg_pool2d`: NCHW -> NC(H*k)(W*k) scaled by 1/k^2.
    pub fn avg_unpool2d(&self, k: usize) -> Result<Tensor> {
        let (n, c, oh, ow) = self.expect_4d("avg_unpool2d")?;
        let out = kernels::avg_unpool2d(self.values(), n, c, oh, ow, k);
        Tensor::record(
            Op::AvgUnpool2d { k },
            &[self],
            TensorData::new_unchecked(vec![n, c, oh * k, ow * k], out),
        )
    }

    fn conv_dims(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> ConvDims {
        ConvDims {
            batch: x_shape[0],
            c_in: x_shape[1],
            in_h: x_shape[2],
            in_w: x_shape[3],
            c_out: w_shape[0],
            k_h: w_shape[2],
            k_w: w_shape[3],
            stride,
            pad,
        }
    }

    /// 2-D convolution: self NCHW, weight [C_out, C_in, kh, kw].
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let (_, ci, h, w) = self.expect_4d("conv2d")?;
        let ws = weight.shape();
        if ws.len() != 4 || ws[1] != ci {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if ws[2] > h + 2 * pad || ws[3] > w + 2 * pad || stride == 0 {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: ws.to_vec(),
                detail: format!("kernel larger than padded input {:?}", self.shape()),
            });
        }
        let d = Tensor::conv_dims(self.shape(), ws, stride, pad);
        let out = kernels::conv2d(ConvMode::Forward, self.values(), weight.values(), &d);
        Tensor::record(
            Op::Conv2d { stride, pad },
            &[self, weight],
            TensorData::new_unchecked(vec![d.batch, d.c_out, d.out_h(), d.out_w()], out),
        )
    }

    /// Gradient of conv2d w.r.t. its input: self is output-shaped, returns
    /// a tensor shaped [B, C_in, input_hw.0, input_hw.1].
    pub fn conv2d_grad_input(
        &self,
        weight: &Tensor,
        stride: usize,
        pad: usize,
        input_hw: (usize, usize),
    ) -> Result<Tensor> {
        let (b, _co, _, _) = self.expect_4d("conv2d_grad_input")?;
        let ws = weight.shape();
        let x_shape = [b, ws[1], input_hw.0, input_hw.1];
        let d = Tensor::conv_dims(&x_shape, ws, stride, pad);
        let out = kernels::conv2d(ConvMode::GradInput, self.values(), weight.values(), &d);
        Tensor::record(
            Op::ConvGradInput { stride, pad },
            &[self, weight],
            TensorData::new_unchecked(x_shape.to_vec(), out),
        )
    }

    /// Gradient of conv2d w.r.t. its weight: self is input-shaped, `up` is
    /// output-shaped, returns [C_out, C_in, kernel_hw.0, kernel_hw.1].
    pub fn conv2d_grad_weight(
        &self,
        up: &Tensor,
        stride: usize,
        pad: usize,
        kernel_hw: (usize, usize),
    ) -> Result<Tensor> {
        let (_, ci, _, _) = self.expect_4d("conv2d_grad_weight")?;
        let (_, co, _, _) = up.expect_4d("conv2d_grad_weight")?;
        let w_shape = [co, ci, kernel_hw.0, kernel_hw.1];
        let d = Tensor::conv_dims(self.shape(), &w_shape, stride, pad);
        let out = kernels::conv2d(ConvMode::GradWeight, self.values(), up.values(), &d);
        Tensor::record(
            Op::ConvGradWeight { stride, pad },
            &[self, up],
            TensorData::new_unchecked(w_shape.to_vec(), out),
        )
    }

    /// Neighbor differences along H (NCHW -> N,C,H-1,W).
    pub fn diff_rows(&self) -> Result<Tensor> {
        let (n, c, h, w) = self.expect_4d("diff_rows")?;
        if h < 2 {
            return Err(TensorError::InvalidShape {
                op: "diff_rows",
                shape: self.shape().to_vec(),
                detail: "needs H >= 2".into(),
            });
        }
        let out = kernels::diff_rows(self.values(), n * c, h, w);
        Tensor::record(
            Op::DiffRows,
            &[self],
            TensorData::new_unchecked(vec![n, c, h - 1, w], out),
        )
    }

    pub fn diff_rows_adjoint(&self) -> Result<Tensor> {
        let (n, c, hm1, w) = self.expect_4d("diff_rows_adjoint")?;
        let out = kernels::diff_rows_adjoint(self.values(), n * c, hm1 + 1, w);
        Tensor::record(
            Op::DiffRowsAdjoint,
            &[self],
            TensorData::new_unchecked(vec![n, c, hm1 + 1, w], out),
        )
    }

    /// Neighbor differences along W (NCHW -> N,C,H,W-1).
    pub fn diff_cols(&self) -> Result<Tensor> {
        let (n, c, h, w) = self.expect_4d("diff_cols")?;
        if w < 2 {
            return Err(TensorError::InvalidShape {
                op: "diff_cols",
                shape: self.shape().to_vec(),
                detail: "needs W >= 2".into(),
            });
        }
        let out = kernels::diff_cols(self.values(), n * c, h, w);
        Tensor::record(
            Op::DiffCols,
            &[self],
            TensorData::new_unchecked(vec![n, c, h, w - 1], out),
        )
    }

    pub fn diff_cols_adjoint(&self) -> Result<Tensor> {
        let (n, c, h, wm1) = self.expect_4d("diff_cols_adjoint")?;
        let out = kernels::diff_cols_adjoint(self.values(), n * c, h, wm1 + 1);
        Tensor::record(
            Op::DiffColsAdjoint,
            &[self],
            TensorData::new_unchecked(vec![n, c, h, wm1 + 1], out),
        )
    }

    // ---- composites --------------------------------------------------------

    /// Row-wise softmax of [B,K] logits, shifted by the (constant) row max.
    pub fn softmax(&self) -> Result<Tensor> {
        let (b, k) = self.expect_2d("softmax")?;
        let maxes: Vec<f64> = (0..b)
            .map(|r| {
                self.values()[r * k..(r + 1) * k]
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let m = Tensor::from_data(TensorData::new_unchecked(vec![b], maxes));
        let shifted = self.sub(&m.repeat_axis1(k)?)?;
        let e = shifted.exp()?;
        let denom = e.sum_axis1()?.repeat_axis1(k)?;
        e.div(&denom)
    }

    /// Mean cross-entropy of [B,K] logits against integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let (b, k) = self.expect_2d("cross_entropy")?;
        if labels.len() != b {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                shape: vec![labels.len()],
                detail: format!("expected {} labels", b),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                shape: vec![bad],
                detail: format!("label out of range for {} classes", k),
            });
        }
        let maxes: Vec<f64> = (0..b)
            .map(|r| {
                self.values()[r * k..(r + 1) * k]
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let m = Tensor::from_data(TensorData::new_unchecked(vec![b], maxes));
        let shifted = self.sub(&m.repeat_axis1(k)?)?;
        let lse = shifted.exp()?.sum_axis1()?.log()?.add(&m)?;
        let mut onehot = vec![0.0; b * k];
        for (r, &l) in labels.iter().enumerate() {
            onehot[r * k + l] = 1.0;
        }
        let oh = Tensor::from_data(TensorData::new_unchecked(vec![b, k], onehot));
        let picked = self.mul(&oh)?.sum_axis1()?;
        lse.sub(&picked)?.sum_all()?.scale(1.0 / b as f64)
    }

    /// Euclidean norm of all elements.
    pub fn norm_l2(&self) -> Result<Tensor> {
        self.mul(self)?.sum_all()?.sqrt()
    }

    /// Batch normalization over NCHW input using fixed per-channel statistics
    /// (running-stats mode). `gamma`/`beta` are [C] tensors and participate in
    /// differentiation; `mean`/`var` are constants.
    pub fn batchnorm(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        mean: &TensorData,
        var: &TensorData,
        eps: f64,
    ) -> Result<Tensor> {
        let (_, c, _, _) = self.expect_4d("batchnorm")?;
        if mean.numel() != c || var.numel() != c || gamma.numel() != c || beta.numel() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm",
                lhs: self.shape().to_vec(),
                rhs: vec![mean.numel(), var.numel(), gamma.numel(), beta.numel()],
            });
        }
        let inv_std: Vec<f64> = var.values().iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mean_t = Tensor::from_data(mean.clone()).broadcast_channels(self.shape())?;
        let inv_t = Tensor::from_data(TensorData::new_unchecked(vec![c], inv_std))
            .broadcast_channels(self.shape())?;
        let xn = self.sub(&mean_t)?.mul(&inv_t)?;
        let scaled = xn.mul(&gamma.broadcast_channels(self.shape())?)?;
        scaled.add(&beta.broadcast_channels(self.shape())?)
    }

    /// Per-channel batch mean and (population) variance of an NCHW tensor,
    /// both differentiable.
    pub fn batch_stats_channels(&self) -> Result<(Tensor, Tensor)> {
        let (n, _, h, w) = self.expect_4d("batch_stats_channels")?;
        let count = (n * h * w) as f64;
        let mean = self.sum_channels()?.scale(1.0 / count)?;
        let centered = self.sub(&mean.broadcast_channels(self.shape())?)?;
        let var = centered.mul(&centered)?.sum_channels()?.scale(1.0 / count)?;
        Ok((mean, var))
    }
}

/// Reparameterized Gaussian sample `mu + sigma * eps`.
pub fn gaussian_sample(mu: &Tensor, sigma: &Tensor, eps: &Tensor) -> Result<Tensor> {
    mu.add(&sigma.mul(eps)?)
}

/// Output of [`grad`]: one tensor per requested target, plus a flag marking
/// targets that were not reachable from the output (their gradient is zero).
pub struct GradOutput {
    pub grads: Vec<Tensor>,
    pub unreachable: Vec<bool>,
}

impl GradOutput {
    pub fn any_unreachable(&self) -> bool {
        self.unreachable.iter().any(|&u| u)
    }
}

/// Reverse-mode gradient of a scalar `output` w.r.t. `wrt`.
///
/// With `create_graph` the returned tensors stay attached to the graph, so a
/// second `grad` call through them is valid.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<GradOutput> {
    if output.numel() != 1 {
        return Err(TensorError::NotScalarOutput {
            numel: output.numel(),
        });
    }
    for t in wrt {
        if !t.requires_grad {
            return Err(TensorError::RequiresGradMissing);
        }
    }
    let zeros_result = |targets: &[&Tensor]| GradOutput {
        grads: targets.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        unreachable: vec![true; targets.len()],
    };
    let Some(out_ref) = output.node_ref() else {
        return Ok(zeros_result(wrt));
    };
    let graph = out_ref.graph.clone();
    if out_ref.generation != graph.generation() {
        return Err(TensorError::StaleTensor { op: "grad" });
    }
    let out_id = out_ref.id;

    // Node ids of each target, when they live on this graph.
    let wrt_ids: Vec<Option<NodeId>> = wrt
        .iter()
        .map(|t| match t.node_ref() {
            Some(nr)
                if graph.same_graph(&nr.graph)
                    && nr.generation == graph.generation()
                    && nr.id <= out_id =>
            {
                Some(nr.id)
            }
            _ => None,
        })
        .collect();
    if wrt_ids.iter().all(|id| id.is_none()) {
        return Ok(zeros_result(wrt));
    }

    // Restrict the sweep to nodes from which some target is reachable.
    let mut needed = vec![false; out_id + 1];
    {
        let inner = graph.inner.borrow();
        for id in wrt_ids.iter().flatten() {
            needed[*id] = true;
        }
        for id in 0..=out_id {
            if !needed[id] {
                needed[id] = inner.nodes[id].inputs.iter().any(|&i| needed[i]);
            }
        }
    }

    let prev_recording = graph.set_recording(create_graph);
    let run = || -> Result<Vec<Option<Tensor>>> {
        let mut acc: Vec<Option<Tensor>> = (0..=out_id).map(|_| None).collect();
        acc[out_id] = Some(Tensor::from_data(TensorData::full(output.shape(), 1.0)));
        for id in (0..=out_id).rev() {
            if acc[id].is_none() || !needed[id] {
                continue;
            }
            let (op, inputs, node_requires) = {
                let inner = graph.inner.borrow();
                let n = &inner.nodes[id];
                (n.op.clone(), n.inputs.clone(), n.requires_grad)
            };
            if inputs.is_empty() || !node_requires {
                continue;
            }
            let upstream = acc[id].clone().expect("accumulated gradient");
            let wanted: Vec<bool> = inputs
                .iter()
                .map(|&i| needed[i] && graph.node_requires_grad(i))
                .collect();
            let input_grads = backward::input_gradients(&graph, id, &op, &inputs, &upstream, &wanted)?;
            for (slot, ig) in inputs.iter().zip(input_grads) {
                if let Some(igrad) = ig {
                    let merged = match acc[*slot].take() {
                        None => igrad,
                        Some(prev) => prev.add(&igrad)?,
                    };
                    acc[*slot] = Some(merged);
                }
            }
        }
        Ok(acc)
    };
    let acc = run();
    graph.set_recording(prev_recording);
    let acc = acc?;

    let mut grads = Vec::with_capacity(wrt.len());
    let mut unreachable = Vec::with_capacity(wrt.len());
    for (t, id) in wrt.iter().zip(&wrt_ids) {
        match id.and_then(|i| acc[i].clone()) {
            Some(g) => {
                grads.push(g);
                unreachable.push(false);
            }
            None => {
                grads.push(Tensor::zeros(t.shape()));
                unreachable.push(true);
            }
        }
    }
    Ok(GradOutput { grads, unreachable })
}

#[cfg(test)]
mod tests;
