//! Categorical memory: one prototype row per class, written by masked
//! average pooling plus a momentum blend and read by cosine-similarity
//! softmax weights fused back into the feature map.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::batch::{one_hot, SegBatch};
use crate::error::{Error, Result};
use crate::graph::{no_grad, Group, ParamSet, Tensor};
use crate::nets::{SegNet, NORM_EPS};

/// `N x C` prototype rows plus which classes have ever been written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryMatrix {
    rows: Vec<f64>,
    num_classes: usize,
    channels: usize,
    class_seen: Vec<bool>,
}

impl MemoryMatrix {
    pub fn zeros(num_classes: usize, channels: usize) -> Self {
        MemoryMatrix {
            rows: vec![0.0; num_classes * channels],
            num_classes,
            channels,
            class_seen: vec![false; num_classes],
        }
    }

    pub fn from_rows(rows: Vec<f64>, num_classes: usize, channels: usize, class_seen: Vec<bool>) -> Result<Self> {
        if rows.len() != num_classes * channels || class_seen.len() != num_classes {
            return Err(Error::input(format!(
                "memory of {num_classes}x{channels} given {} values and {} flags",
                rows.len(),
                class_seen.len()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("memory rows must be finite"));
        }
        Ok(MemoryMatrix { rows, num_classes, channels, class_seen })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.rows[n * self.channels..(n + 1) * self.channels]
    }

    pub fn class_seen(&self) -> &[bool] {
        &self.class_seen
    }

    /// Constant `N x C` tensor (the memory is a buffer, never a trainable leaf).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.rows.clone(), &[self.num_classes, self.channels]).expect("validated shape")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for n in 0..self.num_classes {
            let cells: Vec<String> = self.row(n).iter().map(|v| format!("{v:.17e}")).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Per-class pooled features (`N x C`, graph-connected) and pixel counts `K_n`.
#[derive(Clone, Debug)]
pub struct MaskedPool {
    pub pooled: Tensor,
    pub counts: Vec<usize>,
}

/// Class-masked average of `z [B,C,H,W]` under one-hot `y [B,N,H,W]`,
/// pooled over the whole batch. Absent classes get a zero row.
pub fn masked_pool(z: &Tensor, y: &Tensor) -> Result<MaskedPool> {
    let (zs, ys) = (z.shape(), y.shape());
    if zs.len() != 4 || ys.len() != 4 || zs[0] != ys[0] || zs[2..] != ys[2..] {
        return Err(Error::input(format!("masked_pool: features {zs:?} vs one-hot {ys:?}")));
    }
    let (b, n, hw) = (ys[0], ys[1], ys[2] * ys[3]);
    let mut counts = vec![0usize; n];
    for bi in 0..b {
        for (c, count) in counts.iter_mut().enumerate() {
            let plane = &y.data()[(bi * n + c) * hw..(bi * n + c + 1) * hw];
            *count += plane.iter().filter(|&&v| v != 0.0).count();
        }
    }
    // sum_j Y[n,j] Z[c,j] is the 1x1 filter-adjoint of a conv from Z to Y
    let sums = z.conv2d_bwd_filter(y, 1)?.reshape(&[n, zs[1]])?;
    let inv: Vec<f64> = counts.iter().map(|&k| if k > 0 { 1.0 / k as f64 } else { 0.0 }).collect();
    let pooled = sums.mul(&Tensor::new(inv, &[n, 1])?)?;
    Ok(MaskedPool { pooled, counts })
}

fn check_momentum(m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::config(format!("memory momentum must lie in [0,1], got {m}")));
    }
    Ok(())
}

/// Graph-connected momentum blend of `prev` toward `pool`, renormalized to
/// unit rows. Classes with no pixels keep their previous row bitwise.
pub fn momentum_blend(prev: &MemoryMatrix, pool: &MaskedPool, m: f64) -> Result<Tensor> {
    check_momentum(m)?;
    let prev_t = prev.to_tensor();
    if m == 1.0 {
        return Ok(prev_t);
    }
    let blend = prev_t.scale(m).add(&pool.pooled.scale(1.0 - m))?;
    let normed = blend.l2_normalize(1, NORM_EPS)?;
    let active: Vec<f64> = pool.counts.iter().map(|&k| if k > 0 { 1.0 } else { 0.0 }).collect();
    let keep: Vec<f64> = active.iter().map(|a| 1.0 - a).collect();
    let n = prev.num_classes;
    let written = normed.mul(&Tensor::new(active, &[n, 1])?)?;
    Ok(written.add(&prev_t.mul(&Tensor::new(keep, &[n, 1])?)?)?)
}

fn seen_after(prev: &MemoryMatrix, counts: &[usize], rows: &Tensor) -> Vec<bool> {
    let c = prev.channels;
    (0..prev.num_classes)
        .map(|n| {
            let nonzero = rows.data()[n * c..(n + 1) * c].iter().any(|&v| v != 0.0);
            prev.class_seen[n] || (counts[n] > 0 && nonzero)
        })
        .collect()
}

/// Non-differentiable momentum update of a committed memory.
pub fn momentum_update(prev: &MemoryMatrix, pool: &MaskedPool, m: f64) -> Result<MemoryMatrix> {
    let rows = no_grad(|| momentum_blend(prev, pool, m))?;
    commit(prev, &rows, &pool.counts)
}

/// Detaches a blended memory tensor into a new committed matrix.
pub fn commit(prev: &MemoryMatrix, rows: &Tensor, counts: &[usize]) -> Result<MemoryMatrix> {
    let class_seen = seen_after(prev, counts, rows);
    MemoryMatrix::from_rows(rows.to_vec(), prev.num_classes, prev.channels, class_seen)
}

/// Result of one memory update: the new rows (graph-connected to whichever
/// parameter groups were left unfrozen), the pool and the seen flags.
#[derive(Clone, Debug)]
pub struct MemoryUpdate {
    pub rows: Tensor,
    pub pool: MaskedPool,
    pub class_seen: Vec<bool>,
}

impl MemoryUpdate {
    pub fn commit(&self, prev: &MemoryMatrix) -> Result<MemoryMatrix> {
        MemoryMatrix::from_rows(self.rows.to_vec(), prev.num_classes, prev.channels, self.class_seen.clone())
    }
}

/// One-hot ground truth at feature resolution.
pub fn feature_one_hot(net: &SegNet, batch: &SegBatch) -> Result<Tensor> {
    let s = net.config().output_stride;
    let labels = batch.downsampled_labels(s);
    one_hot(&labels, batch.batch, net.config().num_classes, batch.height / s, batch.width / s)
}

/// Update from precomputed encoder features `F`.
pub fn update_from_features(
    net: &SegNet,
    params: &ParamSet,
    prev: &MemoryMatrix,
    features: &Tensor,
    y_small: &Tensor,
    momentum: f64,
) -> Result<MemoryUpdate> {
    let z = net.update_transform(params, features)?;
    let pool = masked_pool(&z, y_small)?;
    let rows = momentum_blend(prev, &pool, momentum)?;
    let class_seen = seen_after(prev, &pool.counts, &rows);
    Ok(MemoryUpdate { rows, pool, class_seen })
}

/// encode -> update transform -> masked pool -> momentum blend. The previous
/// memory enters as a constant; `freeze_encoder` / `freeze_update` put a
/// stop-gradient on the corresponding parameter group.
pub fn update(
    net: &SegNet,
    params: &ParamSet,
    prev: &MemoryMatrix,
    batch: &SegBatch,
    momentum: f64,
    freeze_encoder: bool,
    freeze_update: bool,
) -> Result<MemoryUpdate> {
    check_momentum(momentum)?;
    let mut frozen = Vec::new();
    if freeze_encoder {
        frozen.push(Group::E);
    }
    if freeze_update {
        frozen.push(Group::U);
    }
    let params = params.freeze(&frozen);
    let features = net.encode(&params, &batch.image_tensor())?;
    let y = feature_one_hot(net, batch)?;
    update_from_features(net, &params, prev, &features, &y, momentum)
}

/// Per-pixel softmax over classes of `M[n] . F[:, j]`: `B x N x H' x W'`.
pub fn read_weights(memory: &Tensor, features: &Tensor) -> Result<Tensor> {
    let (ms, fs) = (memory.shape(), features.shape());
    if ms.len() != 2 || fs.len() != 4 || ms[1] != fs[1] {
        return Err(Error::input(format!("read_weights: memory {ms:?} vs features {fs:?}")));
    }
    let sim = features.conv2d(&memory.reshape(&[ms[0], ms[1], 1, 1])?)?;
    Ok(sim.softmax(1)?)
}

/// Weighted memory feature `M^T W` at every pixel: `B x C x H' x W'`.
pub fn weighted_memory(memory: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let ms = memory.shape();
    let filt = memory.t()?.reshape(&[ms[1], ms[0], 1, 1])?;
    Ok(weights.conv2d(&filt)?)
}

/// `relu(Conv1x1([F ; M^T W]))`.
pub fn read_fuse(net: &SegNet, params: &ParamSet, features: &Tensor, memory: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let mem_feat = weighted_memory(memory, weights)?;
    let cat = Tensor::concat(&[features.clone(), mem_feat], 1)?;
    net.fuse(params, &cat)
}

/// Class-wise mean encoder feature over a whole dataset, rows l2-normalized.
/// Classes never observed stay zero and unseen.
pub fn init_memory<I>(net: &SegNet, params: &ParamSet, batches: I) -> Result<MemoryMatrix>
where
    I: IntoIterator<Item = SegBatch>,
{
    let (n, c) = (net.config().num_classes, net.config().feature_channels);
    let mut sums = vec![0.0; n * c];
    let mut counts = vec![0usize; n];
    let mut any = false;
    let params = params.freeze(&Group::ALL);
    for batch in batches {
        any = true;
        let f = no_grad(|| net.encode(&params, &batch.image_tensor()))?;
        let labels = batch.downsampled_labels(net.config().output_stride);
        let hw = f.shape()[2] * f.shape()[3];
        for (idx, &l) in labels.iter().enumerate() {
            if l as usize >= n {
                continue;
            }
            let (b, j) = (idx / hw, idx % hw);
            counts[l as usize] += 1;
            for ch in 0..c {
                sums[l as usize * c + ch] += f.data()[(b * c + ch) * hw + j];
            }
        }
    }
    if !any {
        return Err(Error::input("memory initialization needs at least one batch"));
    }
    let mut seen = vec![false; n];
    for k in 0..n {
        if counts[k] == 0 {
            continue;
        }
        let row = &mut sums[k * c..(k + 1) * c];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        row.iter_mut().for_each(|v| *v /= norm);
        seen[k] = true;
    }
    MemoryMatrix::from_rows(sums, n, c, seen)
}
