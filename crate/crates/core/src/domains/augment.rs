//! Geometric and photometric augmentation. Geometry moves image and label
//! map in lockstep; labels are always resampled by nearest neighbour.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::photometric::{BlurSpec, ColorJitter};
use super::SceneSample;
use crate::batch::IGNORE_LABEL;
use crate::error::{Error, Result};

/// Settings for [`standard_augment`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentation {
    /// Uniform random rescale range.
    pub scale: [f64; 2],
    pub hflip_prob: f64,
    pub jitter: ColorJitter,
    pub blur: BlurSpec,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            scale: [0.5, 2.0],
            hflip_prob: 0.5,
            jitter: ColorJitter::STANDARD,
            blur: BlurSpec { prob: 0.5, ..BlurSpec::default() },
        }
    }
}

impl Augmentation {
    /// Photometric-only pipeline used for the single-source meta-test batch.
    pub fn heavy() -> Self {
        Augmentation {
            scale: [1.0, 1.0],
            hflip_prob: 0.0,
            jitter: ColorJitter::HEAVY,
            blur: BlurSpec { prob: 0.5, ..BlurSpec::default() },
        }
    }

    pub fn none() -> Self {
        Augmentation { scale: [1.0, 1.0], hflip_prob: 0.0, jitter: ColorJitter::NONE, blur: BlurSpec::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::config(format!("augmentation scale range [{lo}, {hi}] is invalid")));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) || !(0.0..=1.0).contains(&self.blur.prob) {
            return Err(Error::config("augmentation probabilities must lie in [0,1]"));
        }
        let j = &self.jitter;
        if [j.brightness, j.contrast, j.saturation, j.hue].iter().any(|v| *v < 0.0) || j.hue > 0.5 {
            return Err(Error::config("jitter strengths must be non-negative (hue at most 0.5)"));
        }
        Ok(())
    }
}

/// Random rescale, pad, crop back to the input size, flip, jitter, blur.
pub fn standard_augment<R: Rng>(sample: &SceneSample, aug: &Augmentation, rng: &mut R) -> Result<SceneSample> {
    let (h, w) = (sample.height, sample.width);
    let [lo, hi] = aug.scale;
    let s = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let mut out = if s == 1.0 { sample.clone() } else { rescale(sample, s) };
    if out.height < h || out.width < w {
        let top = rng.gen_range(0..=h.saturating_sub(out.height));
        let left = rng.gen_range(0..=w.saturating_sub(out.width));
        out = pad_to(&out, h.max(out.height), w.max(out.width), top, left);
    }
    out = random_crop(&out, h, w, rng)?;
    if aug.hflip_prob > 0.0 && rng.gen::<f64>() < aug.hflip_prob {
        out = hflip(&out);
    }
    photometric(&mut out, &aug.jitter, &aug.blur, rng);
    Ok(out)
}

/// Colour jitter and blur only; labels are never touched.
pub fn heavy_augment<R: Rng>(sample: &SceneSample, jitter: &ColorJitter, blur: &BlurSpec, rng: &mut R) -> SceneSample {
    let mut out = sample.clone();
    photometric(&mut out, jitter, blur, rng);
    out
}

fn photometric<R: Rng>(s: &mut SceneSample, jitter: &ColorJitter, blur: &BlurSpec, rng: &mut R) {
    jitter.apply(&mut s.image, rng);
    blur.apply(&mut s.image, s.height, s.width, rng);
}

pub fn hflip(sample: &SceneSample) -> SceneSample {
    let (h, w) = (sample.height, sample.width);
    let mut out = sample.clone();
    for i in 0..h {
        for j in 0..w {
            out.labels[i * w + j] = sample.labels[i * w + (w - 1 - j)];
            for c in 0..3 {
                out.image[c * h * w + i * w + j] = sample.image[c * h * w + i * w + (w - 1 - j)];
            }
        }
    }
    out
}

/// Bilinear image / nearest label resize by `factor` (pixel-centre aligned).
pub fn rescale(sample: &SceneSample, factor: f64) -> SceneSample {
    let (h, w) = (sample.height, sample.width);
    let nh = ((h as f64 * factor).round() as usize).max(1);
    let nw = ((w as f64 * factor).round() as usize).max(1);
    let (fy, fx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    let mut image = vec![0.0; 3 * nh * nw];
    let mut labels = vec![0u8; nh * nw];
    for i in 0..nh {
        let sy = ((i as f64 + 0.5) * fy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, ty) = (sy.floor() as usize, sy - sy.floor());
        let y1 = (y0 + 1).min(h - 1);
        let ly = (((i as f64 + 0.5) * fy) as usize).min(h - 1);
        for j in 0..nw {
            let sx = ((j as f64 + 0.5) * fx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, tx) = (sx.floor() as usize, sx - sx.floor());
            let x1 = (x0 + 1).min(w - 1);
            let lx = (((j as f64 + 0.5) * fx) as usize).min(w - 1);
            labels[i * nw + j] = sample.labels[ly * w + lx];
            for c in 0..3 {
                let p = &sample.image[c * h * w..(c + 1) * h * w];
                let top = p[y0 * w + x0] * (1.0 - tx) + p[y0 * w + x1] * tx;
                let bot = p[y1 * w + x0] * (1.0 - tx) + p[y1 * w + x1] * tx;
                image[c * nh * nw + i * nw + j] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    SceneSample { image, labels, height: nh, width: nw, ..sample.clone() }
}

/// Places the sample at `(top, left)` inside an `h x w` canvas; new image
/// pixels are 0 and new labels are ignore.
pub fn pad_to(sample: &SceneSample, h: usize, w: usize, top: usize, left: usize) -> SceneSample {
    let (sh, sw) = (sample.height, sample.width);
    assert!(top + sh <= h && left + sw <= w, "pad target smaller than sample");
    let mut image = vec![0.0; 3 * h * w];
    let mut labels = vec![IGNORE_LABEL; h * w];
    for i in 0..sh {
        for j in 0..sw {
            labels[(i + top) * w + j + left] = sample.labels[i * sw + j];
            for c in 0..3 {
                image[c * h * w + (i + top) * w + j + left] = sample.image[c * sh * sw + i * sw + j];
            }
        }
    }
    SceneSample { image, labels, height: h, width: w, ..sample.clone() }
}

fn crop_at(sample: &SceneSample, h: usize, w: usize, top: usize, left: usize) -> SceneSample {
    let (sh, sw) = (sample.height, sample.width);
    let mut image = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for i in 0..h {
            let row = c * sh * sw + (i + top) * sw + left;
            image.extend_from_slice(&sample.image[row..row + w]);
        }
    }
    let mut labels = Vec::with_capacity(h * w);
    for i in 0..h {
        let row = (i + top) * sw + left;
        labels.extend_from_slice(&sample.labels[row..row + w]);
    }
    SceneSample { image, labels, height: h, width: w, ..sample.clone() }
}

fn check_crop(sample: &SceneSample, h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h > sample.height || w > sample.width {
        return Err(Error::input(format!(
            "crop {h}x{w} does not fit inside a {}x{} sample",
            sample.height, sample.width
        )));
    }
    Ok(())
}

pub fn random_crop<R: Rng>(sample: &SceneSample, h: usize, w: usize, rng: &mut R) -> Result<SceneSample> {
    check_crop(sample, h, w)?;
    let top = rng.gen_range(0..=sample.height - h);
    let left = rng.gen_range(0..=sample.width - w);
    Ok(crop_at(sample, h, w, top, left))
}

/// Centre crop; a sample smaller than the target is first zero/ignore padded
/// symmetrically, so the output is always `h x w`.
pub fn center_crop(sample: &SceneSample, h: usize, w: usize) -> Result<SceneSample> {
    if h == 0 || w == 0 {
        return Err(Error::input("crop size must be positive"));
    }
    let padded = if sample.height < h || sample.width < w {
        let (ph, pw) = (h.max(sample.height), w.max(sample.width));
        pad_to(sample, ph, pw, (ph - sample.height) / 2, (pw - sample.width) / 2)
    } else {
        sample.clone()
    };
    check_crop(&padded, h, w)?;
    Ok(crop_at(&padded, h, w, (padded.height - h) / 2, (padded.width - w) / 2))
}
