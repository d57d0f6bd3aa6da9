//! Pixel-value transforms on planar RGB images (`3 x H x W`, values in `[0,1]`).

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Jitter strengths. A factor for brightness, contrast and saturation is drawn
/// from `[max(0, 1 - s), 1 + s]`; the hue shift from `[-hue, hue]` (fraction
/// of a full turn).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for ColorJitter {
    fn default() -> Self {
        ColorJitter::NONE
    }
}

impl ColorJitter {
    pub const NONE: ColorJitter = ColorJitter { brightness: 0.0, contrast: 0.0, saturation: 0.0, hue: 0.0 };
    pub const STANDARD: ColorJitter = ColorJitter { brightness: 0.4, contrast: 0.4, saturation: 0.4, hue: 0.1 };
    pub const HEAVY: ColorJitter = ColorJitter { brightness: 0.8, contrast: 0.8, saturation: 0.8, hue: 0.3 };

    pub fn is_identity(&self) -> bool {
        *self == ColorJitter::NONE
    }

    pub fn apply<R: Rng>(&self, img: &mut [f64], rng: &mut R) {
        if self.brightness > 0.0 {
            brightness(img, factor(self.brightness, rng));
        }
        if self.contrast > 0.0 {
            contrast(img, factor(self.contrast, rng));
        }
        if self.saturation > 0.0 {
            saturation(img, factor(self.saturation, rng));
        }
        if self.hue > 0.0 {
            hue_shift(img, rng.gen_range(-self.hue..=self.hue));
        }
    }
}

fn factor<R: Rng>(strength: f64, rng: &mut R) -> f64 {
    rng.gen_range((1.0 - strength).max(0.0)..=1.0 + strength)
}

/// Gaussian blur applied with probability `prob`, sigma uniform in `[sigma_min, sigma_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlurSpec {
    pub prob: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for BlurSpec {
    fn default() -> Self {
        BlurSpec { prob: 0.0, sigma_min: 0.1, sigma_max: 2.0 }
    }
}

impl BlurSpec {
    pub fn apply<R: Rng>(&self, img: &mut [f64], h: usize, w: usize, rng: &mut R) {
        if self.prob <= 0.0 || self.sigma_max <= 0.0 {
            return;
        }
        if rng.gen::<f64>() < self.prob {
            let sigma = rng.gen_range(self.sigma_min.min(self.sigma_max)..=self.sigma_max);
            gaussian_blur(img, h, w, sigma);
        }
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

pub fn brightness(img: &mut [f64], f: f64) {
    img.iter_mut().for_each(|v| *v = clamp01(*v * f));
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Blend with the mean grey level of the image.
pub fn contrast(img: &mut [f64], f: f64) {
    let hw = img.len() / 3;
    let mean = (0..hw).map(|p| luma(img[p], img[hw + p], img[2 * hw + p])).sum::<f64>() / hw as f64;
    img.iter_mut().for_each(|v| *v = clamp01(mean + (*v - mean) * f));
}

/// Blend each pixel with its own grey level.
pub fn saturation(img: &mut [f64], f: f64) {
    let hw = img.len() / 3;
    for p in 0..hw {
        let g = luma(img[p], img[hw + p], img[2 * hw + p]);
        for c in 0..3 {
            let v = &mut img[c * hw + p];
            *v = clamp01(g + (*v - g) * f);
        }
    }
}

pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

pub fn hue_shift(img: &mut [f64], shift: f64) {
    let hw = img.len() / 3;
    for p in 0..hw {
        let (h, s, v) = rgb_to_hsv(img[p], img[hw + p], img[2 * hw + p]);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        img[p] = clamp01(r);
        img[hw + p] = clamp01(g);
        img[2 * hw + p] = clamp01(b);
    }
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &mut [f64], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; h * w];
    for plane in img.chunks_mut(h * w) {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, k) in kernel.iter().enumerate() {
                    let jj = (j as isize + t as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += k * plane[i * w + jj];
                }
                tmp[i * w + j] = acc;
            }
        }
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, k) in kernel.iter().enumerate() {
                    let ii = (i as isize + t as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += k * tmp[ii * w + j];
                }
                plane[i * w + j] = clamp01(acc);
            }
        }
    }
}
