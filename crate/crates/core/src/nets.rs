//! The four sub-networks: encoder `E`, memory-updating network `U`,
//! decoder `D` (fusion conv + pixel classifier) and memory classifier `G`.
//!
//! Networks hold no weights. Every forward function takes a [`ParamSet`]
//! and looks its parameters up by `group/layer/param` name.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Group, ParamRecord, ParamSet, ParamValues, Tensor};

/// Denominator floor of every l2 normalization.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegNetConfig {
    pub num_classes: usize,
    pub feature_channels: usize,
    /// Number of `[3x3 conv -> relu]` encoder blocks.
    pub encoder_depth: usize,
    /// Spatial reduction of the encoder (power of two).
    pub output_stride: usize,
    pub hidden_channels: usize,
    /// When false the decoder consumes encoder features directly and the
    /// `U` and `G` groups are not instantiated.
    pub read_memory: bool,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            num_classes: 5,
            feature_channels: 32,
            encoder_depth: 3,
            output_stride: 4,
            hidden_channels: 16,
            read_memory: true,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.output_stride;
        if self.num_classes < 2 || self.num_classes > 254 {
            return Err(Error::config(format!("num_classes must be in 2..=254, got {}", self.num_classes)));
        }
        if self.feature_channels == 0 || self.hidden_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if s == 0 || !s.is_power_of_two() {
            return Err(Error::config(format!("output_stride must be a power of two, got {s}")));
        }
        if self.encoder_depth == 0 || (s.trailing_zeros() as usize) > self.encoder_depth {
            return Err(Error::config(format!(
                "encoder_depth {} cannot reach output stride {s} (one 2x downsample per block)",
                self.encoder_depth
            )));
        }
        Ok(())
    }

    fn downsamples(&self) -> usize {
        self.output_stride.trailing_zeros() as usize
    }
}

struct LayerSpec {
    group: Group,
    layer: String,
    cout: usize,
    cin: usize,
    k: usize,
    /// Fully connected `[cin, cout]` instead of a conv filter.
    dense: bool,
}

/// Segmentation network with the categorical-memory read path.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    cfg: SegNetConfig,
}

fn conv_bias(x: &Tensor, p: &ParamSet, layer: &str) -> Result<Tensor> {
    let w = p.get(&format!("{layer}/weight"))?;
    let b = p.get(&format!("{layer}/bias"))?;
    let y = x.conv2d(w)?;
    Ok(y.add(&b.reshape(&[1, b.numel(), 1, 1])?)?)
}

impl SegNet {
    pub fn new(cfg: SegNetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SegNet { cfg })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.cfg
    }

    fn layers(&self) -> Vec<LayerSpec> {
        let c = &self.cfg;
        let conv = |group, layer: String, cout, cin, k| LayerSpec { group, layer, cout, cin, k, dense: false };
        let mut out = Vec::new();
        for i in 0..c.encoder_depth {
            let cin = if i == 0 { 3 } else { c.hidden_channels };
            out.push(conv(Group::E, format!("E/enc{i}"), c.hidden_channels, cin, 3));
        }
        out.push(conv(Group::E, "E/proj".into(), c.feature_channels, c.hidden_channels, 1));
        if c.read_memory {
            out.push(conv(Group::U, "U/conv".into(), c.feature_channels, c.feature_channels, 1));
            out.push(conv(Group::D, "D/fuse".into(), c.feature_channels, 2 * c.feature_channels, 1));
        } else {
            out.push(conv(Group::D, "D/fuse".into(), c.feature_channels, c.feature_channels, 1));
        }
        out.push(conv(Group::D, "D/cls".into(), c.num_classes, c.feature_channels, 1));
        if c.read_memory {
            out.push(LayerSpec {
                group: Group::G,
                layer: "G/fc".into(),
                cout: c.num_classes,
                cin: c.feature_channels,
                k: 1,
                dense: true,
            });
        }
        out
    }

    /// Seeded initialization: weights uniform in `+-sqrt(6 / (fan_in + fan_out))`,
    /// zero biases except the encoder projection. Its bias is drawn like the
    /// weights so that a pixel whose hidden activations all vanish (zero
    /// padding, dead relus) still gets a well-defined unit feature instead of
    /// sitting on the singular point of the l2 normalization.
    pub fn init_params(&self, seed: u64) -> ParamValues {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::new();
        for l in self.layers() {
            let fan_in = l.cin * l.k * l.k;
            let fan_out = l.cout * l.k * l.k;
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let shape = if l.dense { vec![l.cin, l.cout] } else { vec![l.cout, l.cin, l.k, l.k] };
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            records.push(ParamRecord { group: l.group, name: format!("{}/weight", l.layer), shape, data });
            records.push(ParamRecord {
                group: l.group,
                name: format!("{}/bias", l.layer),
                shape: vec![l.cout],
                data: if l.layer == "E/proj" {
                    (0..l.cout).map(|_| rng.gen_range(-bound..bound)).collect()
                } else {
                    vec![0.0; l.cout]
                },
            });
        }
        ParamValues { records }
    }

    /// Parameter count per group, derived from the configuration alone.
    pub fn param_counts(&self) -> BTreeMap<Group, usize> {
        let mut counts: BTreeMap<Group, usize> = Group::ALL.iter().map(|&g| (g, 0)).collect();
        for l in self.layers() {
            *counts.entry(l.group).or_default() += l.cout * l.cin * l.k * l.k + l.cout;
        }
        counts
    }

    pub fn check_image_shape(&self, shape: &[usize]) -> Result<()> {
        let s = self.cfg.output_stride;
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::input(format!("expected images shaped [B,3,H,W], got {shape:?}")));
        }
        if shape[2] % s != 0 || shape[3] % s != 0 {
            return Err(Error::input(format!(
                "image size {}x{} is not divisible by output stride {s}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    /// `B x 3 x H x W` -> per-pixel l2-normalized features `B x C x H/s x W/s`.
    pub fn encode(&self, p: &ParamSet, image: &Tensor) -> Result<Tensor> {
        self.check_image_shape(image.shape())?;
        let mut x = image.clone();
        for i in 0..self.cfg.encoder_depth {
            x = conv_bias(&x, p, &format!("E/enc{i}"))?.relu();
            if i < self.cfg.downsamples() {
                x = x.avg_pool(2)?;
            }
        }
        let f = conv_bias(&x, p, "E/proj")?;
        Ok(f.l2_normalize(1, NORM_EPS)?)
    }

    /// `Z = F + Conv1x1(F)`.
    pub fn update_transform(&self, p: &ParamSet, features: &Tensor) -> Result<Tensor> {
        let w = p.get("U/conv/weight")?;
        if features.rank() != 4 || features.shape()[1] != w.shape()[1] {
            return Err(Error::input(format!(
                "update network expects {} channels, got features shaped {:?}",
                w.shape()[1],
                features.shape()
            )));
        }
        Ok(features.add(&conv_bias(features, p, "U/conv")?)?)
    }

    /// Fusion conv + relu over already-concatenated (or plain) features.
    pub fn fuse(&self, p: &ParamSet, input: &Tensor) -> Result<Tensor> {
        Ok(conv_bias(input, p, "D/fuse")?.relu())
    }

    /// Pixel classifier followed by nearest-neighbour upsampling to full resolution.
    pub fn decode(&self, p: &ParamSet, fused: &Tensor) -> Result<Tensor> {
        let logits = conv_bias(fused, p, "D/cls")?;
        Ok(logits.upsample_nearest(self.cfg.output_stride)?)
    }

    /// Memory classifier logits for rows `K x C` -> `K x N`.
    pub fn memory_logits(&self, p: &ParamSet, rows: &Tensor) -> Result<Tensor> {
        let w = p.get("G/fc/weight")?;
        let b = p.get("G/fc/bias")?;
        Ok(rows.matmul(w)?.add(b)?)
    }

    /// Softmax class probabilities for one memory row of length `C`.
    pub fn classify_memory(&self, p: &ParamSet, row: &Tensor) -> Result<Tensor> {
        let row = row.reshape(&[1, row.numel()])?;
        let probs = self.memory_logits(p, &row)?.softmax(1)?;
        Ok(probs.reshape(&[self.cfg.num_classes])?)
    }

    /// Encoder -> fusion -> decoder without any memory (baseline path).
    pub fn segment_plain(&self, p: &ParamSet, image: &Tensor) -> Result<Tensor> {
        let f = self.encode(p, image)?;
        self.decode(p, &self.fuse(p, &f)?)
    }
}
