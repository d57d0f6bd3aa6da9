use std::cell::Cell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::GraphError;

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

struct GradModeGuard(bool);

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

/// Runs `f` with graph recording disabled on this thread. Every tensor built
/// inside is a constant leaf.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _guard = GradModeGuard(prev);
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Operation that produced a tensor. Attributes needed by the backward rule
/// are stored inline.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    Sqrt,
    Relu,
    ClampMin(f64),
    SumTo,
    BroadcastTo,
    Reshape,
    Permute(Vec<usize>),
    MatMul,
    Conv2d,
    ConvBwdData,
    ConvBwdFilter(usize),
    Concat(usize),
    Narrow { axis: usize, start: usize },
    PadAxis { axis: usize, start: usize },
    SumPool(usize),
    Upsample(usize),
    Subsample(usize),
    ScatterUp(usize),
}

impl Op {
    pub(crate) fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Relu => "relu",
            Op::ClampMin(_) => "clamp_min",
            Op::SumTo => "sum_to",
            Op::BroadcastTo => "broadcast_to",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::MatMul => "matmul",
            Op::Conv2d => "conv2d",
            Op::ConvBwdData => "conv2d_bwd_data",
            Op::ConvBwdFilter(_) => "conv2d_bwd_filter",
            Op::Concat(_) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::PadAxis { .. } => "pad_axis",
            Op::SumPool(_) => "sum_pool",
            Op::Upsample(_) => "upsample_nearest",
            Op::Subsample(_) => "downsample_nearest",
            Op::ScatterUp(_) => "scatter_up",
        }
    }
}

pub(crate) struct Node {
    pub(crate) id: usize,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) op: Op,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) requires_grad: bool,
}

/// A node in the differentiable computation graph: a dense row-major `f64`
/// array plus the operation and inputs that produced it.
///
/// Cloning is cheap (reference counted). Gradients returned by
/// [`grad`](super::grad) with `create_graph = true` are ordinary tensors and
/// can be differentiated again.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Node>);

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op, parents: Vec<Tensor>) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape), "{}", op.tag());
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let (op, parents) = if requires_grad { (op, parents) } else { (Op::Leaf, Vec::new()) };
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            op,
            parents,
            requires_grad,
        }))
    }

    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Tensor, GraphError> {
        if data.len() != numel(&shape) {
            return Err(GraphError::DataLength { shape, len: data.len() });
        }
        Ok(Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad,
        })))
    }

    /// Constant leaf: never receives a gradient.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor, GraphError> {
        Self::leaf(data, shape.to_vec(), false)
    }

    /// Trainable leaf: gradients can be taken with respect to it.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor, GraphError> {
        Self::leaf(data, shape.to_vec(), true)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_op(vec![v], Vec::new(), Op::Leaf, Vec::new())
    }

    pub fn from_vec(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor::from_op(data, vec![n], Op::Leaf, Vec::new())
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::from_op(vec![v; numel(shape)], shape.to_vec(), Op::Leaf, Vec::new())
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Self::full(shape, 1.0)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Name of the producing operation (`"leaf"` for inputs and constants).
    pub fn op_tag(&self) -> &'static str {
        self.0.op.tag()
    }

    pub fn parents(&self) -> &[Tensor] {
        &self.0.parents
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Identity in the forward pass, exact zero gradient in the backward pass.
    pub fn stop_gradient(&self) -> Tensor {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: self.0.shape.clone(),
            data: self.0.data.clone(),
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad: false,
        }))
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.0.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("op", &self.op_tag())
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}
