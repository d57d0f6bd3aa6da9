//! Segmentation cross-entropy, feature cohesion, memory divergence and the
//! composite read / update objectives.

use serde::{Deserialize, Serialize};

use crate::batch::{one_hot, SegBatch};
use crate::error::{Error, Result};
use crate::graph::{ParamSet, Tensor};
use crate::memory::{self, MemoryMatrix, MemoryUpdate};
use crate::nets::SegNet;

/// Floor applied inside every logarithm of a probability.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Cohesion weight in the read objective.
    pub lambda1: f64,
    /// Divergence weight in the update objective.
    pub lambda2: f64,
    /// Hinge margin of the pairwise cosine term.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 0.02, lambda2: 0.2, margin: 0.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !self.margin.is_finite() {
            return Err(Error::config("margin must be finite"));
        }
        Ok(())
    }
}

fn counted(y: &Tensor, op: &str) -> Result<usize> {
    let n = y.data().iter().filter(|&&v| v != 0.0).count();
    if n == 0 {
        return Err(Error::input(format!("{op}: every pixel is ignore, mean is undefined")));
    }
    Ok(n)
}

/// Mean over non-ignore pixels of `-log softmax(logits)[label]`.
pub fn seg_loss(logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 4 || labels.len() != s[0] * s[2] * s[3] {
        return Err(Error::input(format!("seg_loss: logits {s:?} with {} labels", labels.len())));
    }
    let y = one_hot(labels, s[0], s[1], s[2], s[3])?;
    let n = counted(&y, "seg_loss")?;
    let nll = y.mul(&logits.log_softmax(1)?)?.sum_all();
    Ok(nll.scale(-1.0 / n as f64))
}

/// Cross-entropy between one-hot ground truth and memory read weights,
/// averaged over non-ignore pixels.
pub fn cohesion_loss(weights: &Tensor, y: &Tensor) -> Result<Tensor> {
    if weights.shape() != y.shape() {
        return Err(Error::input(format!("cohesion_loss: weights {:?} vs one-hot {:?}", weights.shape(), y.shape())));
    }
    let n = counted(y, "cohesion_loss")?;
    let ce = y.mul(&weights.safe_ln(LOG_FLOOR))?.sum_all();
    Ok(ce.scale(-1.0 / n as f64))
}

/// Per-term breakdown of the divergence loss.
#[derive(Clone, Debug)]
pub struct Divergence {
    pub total: Tensor,
    pub classification: Tensor,
    pub pairwise: Tensor,
}

/// Memory classification cross-entropy plus twice the mean hinged pairwise
/// cosine between rows. Rows not yet seen are left out of both terms.
pub fn divergence_loss(net: &SegNet, params: &ParamSet, rows: &Tensor, class_seen: &[bool], margin: f64) -> Result<Divergence> {
    let n = net.config().num_classes;
    if rows.shape() != [n, net.config().feature_channels] || class_seen.len() != n {
        return Err(Error::input(format!("divergence_loss: memory {:?} for {n} classes", rows.shape())));
    }
    let idx: Vec<usize> = (0..n).filter(|&k| class_seen[k]).collect();
    let k = idx.len();
    if k == 0 {
        let zero = Tensor::scalar(0.0);
        return Ok(Divergence { total: zero.clone(), classification: zero.clone(), pairwise: zero });
    }
    let mut select = vec![0.0; k * n];
    for (r, &c) in idx.iter().enumerate() {
        select[r * n + c] = 1.0;
    }
    let select = Tensor::new(select, &[k, n])?;
    let picked = if k == n { rows.clone() } else { select.matmul(rows)? };
    let logp = net.memory_logits(params, &picked)?.log_softmax(1)?;
    // the selection matrix doubles as the one-hot target
    let classification = select.mul(&logp)?.sum_all().neg();
    let pairwise = if k < 2 {
        Tensor::scalar(0.0)
    } else {
        let cos = picked.matmul(&picked.t()?)?;
        let mut off = vec![1.0; k * k];
        for i in 0..k {
            off[i * k + i] = 0.0;
        }
        let hinge = cos.add_scalar(-margin).relu().mul(&Tensor::new(off, &[k, k])?)?;
        hinge.sum_all().scale(2.0 / (k * (k - 1)) as f64)
    };
    let total = classification.add(&pairwise)?;
    Ok(Divergence { total, classification, pairwise })
}

/// Scalars of the read objective.
#[derive(Clone, Debug)]
pub struct ReadLoss {
    pub total: Tensor,
    pub seg: Tensor,
    pub cohesion: Tensor,
    pub logits: Tensor,
}

/// Full read path from precomputed features: read weights, fusion, decoder,
/// then `L_seg + lambda1 * L_coh`.
pub fn read_loss_from_features(
    net: &SegNet,
    params: &ParamSet,
    memory: &Tensor,
    features: &Tensor,
    y_small: &Tensor,
    batch: &SegBatch,
    weights: &LossWeights,
) -> Result<ReadLoss> {
    let w = memory::read_weights(memory, features)?;
    let fused = memory::read_fuse(net, params, features, memory, &w)?;
    let logits = net.decode(params, &fused)?;
    let seg = seg_loss(&logits, &batch.labels)?;
    let cohesion = cohesion_loss(&w, y_small)?;
    let total = if weights.lambda1 == 0.0 { seg.clone() } else { seg.add(&cohesion.scale(weights.lambda1))? };
    Ok(ReadLoss { total, seg, cohesion, logits })
}

/// `L_read(M, X; E, D)`. Pass a constant memory for the usual read path.
pub fn read_loss(net: &SegNet, params: &ParamSet, memory: &Tensor, batch: &SegBatch, weights: &LossWeights) -> Result<ReadLoss> {
    let features = net.encode(params, &batch.image_tensor())?;
    let y = memory::feature_one_hot(net, batch)?;
    read_loss_from_features(net, params, memory, &features, &y, batch, weights)
}

/// Scalars of the update objective and the memory it was computed on.
#[derive(Clone, Debug)]
pub struct UpdateLoss {
    pub total: Tensor,
    pub divergence: Divergence,
    pub update: MemoryUpdate,
}

pub fn update_loss_from_features(
    net: &SegNet,
    params: &ParamSet,
    prev: &MemoryMatrix,
    features: &Tensor,
    y_small: &Tensor,
    momentum: f64,
    weights: &LossWeights,
) -> Result<UpdateLoss> {
    let update = memory::update_from_features(net, params, prev, features, y_small, momentum)?;
    let divergence = divergence_loss(net, params, &update.rows, &update.class_seen, weights.margin)?;
    let total = divergence.total.scale(weights.lambda2);
    Ok(UpdateLoss { total, divergence, update })
}

/// `L_update(M, X; E, U, G) = lambda2 * L_div(update(M, X))`.
pub fn update_loss(
    net: &SegNet,
    params: &ParamSet,
    prev: &MemoryMatrix,
    batch: &SegBatch,
    momentum: f64,
    weights: &LossWeights,
) -> Result<UpdateLoss> {
    let features = net.encode(params, &batch.image_tensor())?;
    let y = memory::feature_one_hot(net, batch)?;
    update_loss_from_features(net, params, prev, &features, &y, momentum, weights)
}

/// Plain per-pixel argmax of logits `B x N x H x W`.
pub fn argmax_labels(logits: &Tensor) -> Vec<u8> {
    let s = logits.shape();
    let (b, n, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for j in 0..hw {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..n {
                let v = logits.data()[(bi * n + c) * hw + j];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::IGNORE_LABEL;
    use crate::nets::SegNetConfig;

    #[test]
    fn seg_loss_fixtures() {
        // 1 pixel, logits [1, 0], label 1
        let l = Tensor::new(vec![1.0, 0.0], &[1, 2, 1, 1]).unwrap();
        let v = seg_loss(&l, &[1]).unwrap().item();
        let e = std::f64::consts::E;
        assert!((v + (1.0 / (1.0 + e)).ln()).abs() < 1e-15);
        assert!((v - 1.3133).abs() < 1e-4);

        let uniform = Tensor::zeros(&[1, 5, 2, 2]);
        assert!((seg_loss(&uniform, &[0, 1, 2, 3]).unwrap().item() - 5f64.ln()).abs() < 1e-15);

        let mut margin = vec![0.0; 5 * 4];
        for (p, &c) in [0usize, 3, 4, 1].iter().enumerate() {
            for k in 0..5 {
                margin[k * 4 + p] = if k == c { 50.0 } else { 0.0 };
            }
        }
        let big = Tensor::new(margin, &[1, 5, 2, 2]).unwrap();
        let v = seg_loss(&big, &[0, 3, 4, 1]).unwrap().item();
        assert!((0.0..1e-20).contains(&v), "{v}");
    }

    #[test]
    fn seg_loss_all_ignore_rejected() {
        let l = Tensor::zeros(&[1, 2, 1, 2]);
        assert!(seg_loss(&l, &[IGNORE_LABEL, IGNORE_LABEL]).is_err());
    }

    #[test]
    fn seg_loss_skips_ignore_pixels() {
        let l = Tensor::new(vec![1.0, 9.0, 0.0, -3.0], &[1, 2, 1, 2]).unwrap();
        let a = seg_loss(&l, &[1, IGNORE_LABEL]).unwrap().item();
        let single = Tensor::new(vec![1.0, 0.0], &[1, 2, 1, 1]).unwrap();
        assert_eq!(a, seg_loss(&single, &[1]).unwrap().item());
    }

    #[test]
    fn cohesion_fixtures() {
        let y = one_hot(&[0], 1, 2, 1, 1).unwrap();
        let e = std::f64::consts::E;
        let w = Tensor::new(vec![e / (e + 1.0), 1.0 / (e + 1.0)], &[1, 2, 1, 1]).unwrap();
        let v = cohesion_loss(&w, &y).unwrap().item();
        assert!((v - (1.0 + 1.0 / e).ln()).abs() < 1e-15);
        assert!((v - 0.3133).abs() < 1e-4);

        let exact = cohesion_loss(&y, &y).unwrap().item();
        assert!(exact.abs() < 1e-11);

        let y5 = one_hot(&[0, 4, 2, 2], 1, 5, 2, 2).unwrap();
        let u = Tensor::full(&[1, 5, 2, 2], 0.2);
        assert!((cohesion_loss(&u, &y5).unwrap().item() - 5f64.ln()).abs() < 1e-15);
    }

    fn tiny_net(n: usize, c: usize) -> SegNet {
        SegNet::new(SegNetConfig {
            num_classes: n,
            feature_channels: c,
            encoder_depth: 1,
            output_stride: 2,
            hidden_channels: 2,
            read_memory: true,
        })
        .unwrap()
    }

    fn zero_g(net: &SegNet) -> ParamSet {
        let mut v = net.init_params(0);
        for r in &mut v.records {
            if r.name.starts_with("G/") {
                r.data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        v.to_constants()
    }

    #[test]
    fn divergence_fixtures() {
        let net = tiny_net(2, 2);
        let p = zero_g(&net);
        let identical = Tensor::new(vec![0.6, 0.8, 0.6, 0.8], &[2, 2]).unwrap();
        let d = divergence_loss(&net, &p, &identical, &[true, true], 0.0).unwrap();
        assert!((d.pairwise.item() - 2.0).abs() < 1e-15);
        assert!((d.classification.item() - 2.0 * 2f64.ln()).abs() < 1e-15);

        let net3 = tiny_net(3, 3);
        let p3 = zero_g(&net3);
        let ortho = Tensor::new(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]).unwrap();
        let d = divergence_loss(&net3, &p3, &ortho, &[true; 3], 0.0).unwrap();
        assert_eq!(d.pairwise.item(), 0.0);
        assert!((d.classification.item() - 3.0 * 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn divergence_excludes_unseen_rows() {
        let net = tiny_net(3, 2);
        let p = zero_g(&net);
        let rows = Tensor::new(vec![0.6, 0.8, 0.0, 0.0, 0.6, 0.8], &[3, 2]).unwrap();
        let d = divergence_loss(&net, &p, &rows, &[true, false, true], 0.0).unwrap();
        // two seen identical rows: both ordered pairs have cosine 1
        assert!((d.pairwise.item() - 2.0).abs() < 1e-15);
        assert!((d.classification.item() - 2.0 * 3f64.ln()).abs() < 1e-15);
    }
}
