use std::collections::{HashMap, HashSet};

use super::tensor::{no_grad, Op, Tensor};
use super::GraphError;

type Result<T> = std::result::Result<T, GraphError>;

/// Parents-before-children ordering of every grad-requiring node reachable from `root`.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((node, next)) = stack.pop() {
        if next < node.parents().len() {
            let parent = node.parents()[next].clone();
            stack.push((node, next + 1));
            if parent.requires_grad() && visited.insert(parent.id()) {
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

fn mask_where(x: &Tensor, pred: impl Fn(f64) -> bool) -> Tensor {
    let data = x.data().iter().map(|&v| if pred(v) { 1.0 } else { 0.0 }).collect();
    Tensor::new(data, x.shape()).expect("same shape")
}

/// Vector-Jacobian products of `node` for upstream gradient `g`, one slot per
/// parent (`None` when the parent does not require a gradient).
fn vjp(node: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let ps = node.parents();
    let need: Vec<bool> = ps.iter().map(Tensor::requires_grad).collect();
    let want = |i: usize, f: &dyn Fn() -> Result<Tensor>| -> Result<Option<Tensor>> {
        if need[i] {
            f().map(Some)
        } else {
            Ok(None)
        }
    };
    let grads = match &node.0.op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![
            want(0, &|| g.sum_to(ps[0].shape()))?,
            want(1, &|| g.sum_to(ps[1].shape()))?,
        ],
        Op::Sub => vec![
            want(0, &|| g.sum_to(ps[0].shape()))?,
            want(1, &|| g.neg().sum_to(ps[1].shape()))?,
        ],
        Op::Mul => vec![
            want(0, &|| g.mul(&ps[1])?.sum_to(ps[0].shape()))?,
            want(1, &|| g.mul(&ps[0])?.sum_to(ps[1].shape()))?,
        ],
        Op::Div => vec![
            want(0, &|| g.div(&ps[1])?.sum_to(ps[0].shape()))?,
            want(1, &|| g.mul(node)?.div(&ps[1])?.neg().sum_to(ps[1].shape()))?,
        ],
        Op::Neg => vec![want(0, &|| Ok(g.neg()))?],
        Op::Scale(c) => vec![want(0, &|| Ok(g.scale(*c)))?],
        Op::AddScalar(_) => vec![want(0, &|| Ok(g.clone()))?],
        Op::Exp => vec![want(0, &|| g.mul(node))?],
        Op::Log => vec![want(0, &|| g.div(&ps[0]))?],
        Op::Sqrt => vec![want(0, &|| Ok(g.div(node)?.scale(0.5)))?],
        Op::Relu => vec![want(0, &|| g.mul(&mask_where(&ps[0], |v| v > 0.0)))?],
        Op::ClampMin(floor) => {
            let floor = *floor;
            vec![want(0, &|| g.mul(&mask_where(&ps[0], |v| v > floor)))?]
        }
        Op::SumTo => vec![want(0, &|| g.broadcast_to(ps[0].shape()))?],
        Op::BroadcastTo => vec![want(0, &|| g.sum_to(ps[0].shape()))?],
        Op::Reshape => vec![want(0, &|| g.reshape(ps[0].shape()))?],
        Op::Permute(perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![want(0, &|| g.permute(&inv))?]
        }
        Op::MatMul => vec![
            want(0, &|| g.matmul(&ps[1].t()?))?,
            want(1, &|| ps[0].t()?.matmul(g))?,
        ],
        Op::Conv2d => {
            let k = ps[1].shape()[2];
            vec![
                want(0, &|| g.conv2d_bwd_data(&ps[1]))?,
                want(1, &|| ps[0].conv2d_bwd_filter(g, k))?,
            ]
        }
        // parents: (upstream of the forward conv, filter)
        Op::ConvBwdData => {
            let k = ps[1].shape()[2];
            vec![
                want(0, &|| g.conv2d(&ps[1]))?,
                want(1, &|| g.conv2d_bwd_filter(&ps[0], k))?,
            ]
        }
        // parents: (forward conv input, upstream of the forward conv)
        Op::ConvBwdFilter(_) => vec![
            want(0, &|| ps[1].conv2d_bwd_data(g))?,
            want(1, &|| ps[0].conv2d(g))?,
        ],
        Op::Concat(axis) => {
            let mut start = 0;
            let mut out = Vec::with_capacity(ps.len());
            for (i, p) in ps.iter().enumerate() {
                let len = p.shape()[*axis];
                out.push(want(i, &|| g.narrow(*axis, start, len))?);
                start += len;
            }
            out
        }
        Op::Narrow { axis, start } => {
            let total = ps[0].shape()[*axis];
            vec![want(0, &|| g.pad_axis(*axis, *start, total))?]
        }
        Op::PadAxis { axis, start } => {
            let len = ps[0].shape()[*axis];
            vec![want(0, &|| g.narrow(*axis, *start, len))?]
        }
        Op::SumPool(f) => vec![want(0, &|| g.upsample_nearest(*f))?],
        Op::Upsample(f) => vec![want(0, &|| g.sum_pool(*f))?],
        Op::Subsample(f) => vec![want(0, &|| g.scatter_up(*f))?],
        Op::ScatterUp(f) => vec![want(0, &|| g.downsample_nearest(*f))?],
    };
    Ok(grads)
}

/// Reverse-mode gradient of a single-element `loss` with respect to each of
/// `wrt`. Unreachable tensors get zero gradients.
///
/// With `create_graph` the returned gradients stay connected to the graph
/// and can be differentiated again; otherwise they are constants.
pub fn grad(loss: &Tensor, wrt: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if loss.numel() != 1 {
        return Err(GraphError::NonScalarLoss(loss.shape().to_vec()));
    }
    if create_graph {
        backward(loss, wrt)
    } else {
        no_grad(|| backward(loss, wrt))
    }
}

fn backward(loss: &Tensor, wrt: &[Tensor]) -> Result<Vec<Tensor>> {
    let targets: HashSet<usize> = wrt.iter().map(Tensor::id).collect();
    let mut found: HashMap<usize, Tensor> = HashMap::new();
    if loss.requires_grad() {
        let order = topo_order(loss);
        let mut pending: HashMap<usize, Tensor> = HashMap::new();
        pending.insert(loss.id(), Tensor::ones(loss.shape()));
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else { continue };
            if targets.contains(&node.id()) {
                found.insert(node.id(), g.clone());
            }
            if node.parents().is_empty() {
                continue;
            }
            for (parent, pg) in node.parents().iter().zip(vjp(node, &g)?) {
                let Some(pg) = pg else { continue };
                let acc = match pending.remove(&parent.id()) {
                    Some(prev) => prev.add(&pg)?,
                    None => pg,
                };
                pending.insert(parent.id(), acc);
            }
        }
    }
    Ok(wrt
        .iter()
        .map(|t| found.get(&t.id()).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}
