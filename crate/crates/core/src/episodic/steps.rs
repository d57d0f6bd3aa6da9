use crate::batch::SegBatch;
use crate::error::{Error, Result};
use crate::graph::{grad, no_grad, Group, ParamSet, ParamValues, Tensor};
use crate::losses::{self, LossWeights};
use crate::memory::{self, MemoryMatrix, MemoryUpdate};
use crate::nets::SegNet;

/// Per-step constants shared by the episode operations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSettings {
    pub alpha: f64,
    pub memory_momentum: f64,
    pub loss: LossWeights,
    /// Keep the inner step differentiable. When false the lookahead is a
    /// set of fresh leaves and the outer gradient is first order.
    pub second_order: bool,
}

/// Output of the inner step.
#[derive(Clone, Debug)]
pub struct MetaTrain {
    /// `Theta - alpha * grad` for `E`, `U`, `D`. With `second_order` these are
    /// graph expressions of the original leaves; otherwise detached leaves.
    /// `G` entries are the unchanged originals and are never read downstream.
    pub lookahead: ParamSet,
    /// Inner-step gradient of every `G` entry (values only), committed by the caller.
    pub grads_g: Vec<Tensor>,
    pub l_seg: f64,
    pub l_coh: Option<f64>,
    pub l_div: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct MetaTest {
    /// Outer gradient for every `E`, `U`, `D` entry, in parameter order.
    pub grads: Vec<Tensor>,
    pub loss: f64,
}

/// Inner step: `L_read + L_update` on the meta-train batch (plain
/// segmentation loss without memory), one gradient step of size `alpha`.
pub fn meta_train_step(
    net: &SegNet,
    theta: &ParamSet,
    memory: Option<&MemoryMatrix>,
    batch: &SegBatch,
    s: &StepSettings,
) -> Result<MetaTrain> {
    let (total, l_seg, l_coh, l_div) = if net.config().read_memory {
        let mem = memory.ok_or_else(|| Error::input("memory network stepped without a memory"))?;
        let features = net.encode(theta, &batch.image_tensor())?;
        let y = memory::feature_one_hot(net, batch)?;
        let read = losses::read_loss_from_features(net, theta, &mem.to_tensor(), &features, &y, batch, &s.loss)?;
        let upd = losses::update_loss_from_features(net, theta, mem, &features, &y, s.memory_momentum, &s.loss)?;
        let total = if s.loss.lambda2 == 0.0 { read.total.clone() } else { read.total.add(&upd.total)? };
        (total, read.seg.item(), Some(read.cohesion.item()), Some(upd.divergence.total.item()))
    } else {
        let logits = net.segment_plain(theta, &batch.image_tensor())?;
        let seg = losses::seg_loss(&logits, &batch.labels)?;
        (seg.clone(), seg.item(), None, None)
    };

    let leaves = theta.tensors(&Group::ALL);
    let grads = grad(&total, &leaves, s.second_order)?;
    let mut lookahead = ParamSet::new();
    let mut grads_g = Vec::new();
    for (e, g) in theta.entries().iter().zip(grads) {
        let value = if e.group == Group::G {
            grads_g.push(g.stop_gradient());
            e.value.clone()
        } else if s.second_order {
            e.value.sub(&g.scale(s.alpha))?
        } else {
            let stepped = e.value.stop_gradient().sub(&g.scale(s.alpha))?;
            Tensor::param(stepped.to_vec(), stepped.shape())?
        };
        lookahead.insert(e.group, e.name.clone(), value)?;
    }
    Ok(MetaTrain { lookahead, grads_g, l_seg, l_coh, l_div })
}

/// Memory update on the same meta-train batch under the lookahead, with the
/// encoder frozen: the result depends on the original parameters only
/// through the lookahead of `U`.
pub fn rebuild_memory(
    net: &SegNet,
    lookahead: &ParamSet,
    memory: &MemoryMatrix,
    batch: &SegBatch,
    momentum: f64,
) -> Result<MemoryUpdate> {
    memory::update(net, lookahead, memory, batch, momentum, true, false)
}

/// Outer objective `L_read(M', X_mte)` at the lookahead, differentiated with
/// respect to the original leaves (second order) or the lookahead leaves
/// (first order).
pub fn meta_test_step(
    net: &SegNet,
    theta: &ParamSet,
    inner: &MetaTrain,
    rebuilt: Option<&Tensor>,
    batch: &SegBatch,
    s: &StepSettings,
) -> Result<MetaTest> {
    let loss = if net.config().read_memory {
        let m = rebuilt.ok_or_else(|| Error::input("memory network evaluated without a rebuilt memory"))?;
        losses::read_loss(net, &inner.lookahead, m, batch, &s.loss)?.total
    } else {
        let logits = net.segment_plain(&inner.lookahead, &batch.image_tensor())?;
        losses::seg_loss(&logits, &batch.labels)?
    };
    let groups = [Group::E, Group::U, Group::D];
    let wrt = if s.second_order { theta.tensors(&groups) } else { inner.lookahead.tensors(&groups) };
    let grads = grad(&loss, &wrt, false)?;
    Ok(MetaTest { grads, loss: loss.item() })
}

/// Memory for the next iteration, computed under the committed parameters
/// with every group frozen.
pub fn finalize_memory(
    net: &SegNet,
    params: &ParamValues,
    memory: &MemoryMatrix,
    batch: &SegBatch,
    momentum: f64,
) -> Result<MemoryMatrix> {
    let p = params.to_constants();
    let upd = no_grad(|| memory::update(net, &p, memory, batch, momentum, true, true))?;
    upd.commit(memory)
}

/// Heavy-ball SGD on the named entries: `v = mu * v + g; p -= lr * v`.
pub fn momentum_step(params: &mut ParamValues, velocity: &mut ParamValues, names: &[String], grads: &[Tensor], lr: f64, mu: f64) {
    for (name, g) in names.iter().zip(grads) {
        let p = params.get_mut(name).expect("gradient for a known parameter");
        let v = velocity.get_mut(name).expect("velocity mirrors params");
        for ((pi, vi), gi) in p.data.iter_mut().zip(v.data.iter_mut()).zip(g.data()) {
            *vi = mu * *vi + gi;
            *pi -= lr * *vi;
        }
    }
}
