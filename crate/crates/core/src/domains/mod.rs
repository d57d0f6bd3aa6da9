//! Procedural multi-domain segmentation scenes.
//!
//! Geometry (which shapes, where) is a function of the geometry seed alone;
//! every [`DomainSpec`] only changes pixel values. Class 0 is background,
//! classes 1..=4 are circle, rectangle, triangle and cross.

mod augment;
mod dataset;
pub mod photometric;

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{center_crop, heavy_augment, hflip, pad_to, random_crop, rescale, standard_augment, Augmentation};
pub use dataset::{build_pools, dump_dataset, mix_seed, DatasetConfig, DomainPool, Manifest, ManifestEntry};
pub use photometric::{BlurSpec, ColorJitter};

use crate::batch::{SegBatch, IGNORE_LABEL};
use crate::error::{Error, Result};

/// Number of shape classes drawn by the generator (background excluded).
pub const SHAPE_CLASSES: usize = 4;
pub const SCENE_CLASSES: usize = SHAPE_CLASSES + 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorDist {
    pub mean: [f64; 3],
    /// Half-width of the per-channel uniform perturbation.
    pub spread: f64,
}

impl ColorDist {
    fn sample<R: Rng>(&self, rng: &mut R) -> [f64; 3] {
        let mut c = self.mean;
        if self.spread > 0.0 {
            for v in &mut c {
                *v = (*v + rng.gen_range(-self.spread..=self.spread)).clamp(0.0, 1.0);
            }
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Texture {
    /// Amplitude of a low-frequency sinusoidal pattern.
    pub amplitude: f64,
    /// Pattern frequency in cycles per image side.
    pub frequency: f64,
    /// Half-width of independent per-pixel uniform noise.
    pub noise: f64,
}

impl Default for Texture {
    fn default() -> Self {
        Texture { amplitude: 0.0, frequency: 2.0, noise: 0.0 }
    }
}

/// Visual style of one source or target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub id: String,
    /// One colour distribution per class, background first.
    pub palette: Vec<ColorDist>,
    #[serde(default)]
    pub texture: Texture,
    /// Blur sigma drawn uniformly from this range (zero disables).
    #[serde(default)]
    pub blur_sigma: [f64; 2],
    #[serde(default)]
    pub jitter: ColorJitter,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(['/', ':', ',']) {
            return Err(Error::config(format!("domain id `{}` must be non-empty without '/', ':' or ','", self.id)));
        }
        if self.palette.len() != SCENE_CLASSES {
            return Err(Error::config(format!(
                "domain `{}` needs {SCENE_CLASSES} palette entries, got {}",
                self.id,
                self.palette.len()
            )));
        }
        if self.blur_sigma[0] < 0.0 || self.blur_sigma[1] < self.blur_sigma[0] {
            return Err(Error::config(format!("domain `{}` has an invalid blur range", self.id)));
        }
        Ok(())
    }
}

fn dist(r: f64, g: f64, b: f64, spread: f64) -> ColorDist {
    ColorDist { mean: [r, g, b], spread }
}

/// Three visibly different styles of the same classes: saturated and flat on
/// grey, dim and noisy on near-black, washed-out and blurred on off-white.
/// Every class keeps its hue family across domains; brightness, saturation,
/// background, texture and blur shift.
pub fn default_domains() -> Vec<DomainSpec> {
    vec![
        DomainSpec {
            id: "vivid".into(),
            palette: vec![
                dist(0.50, 0.50, 0.50, 0.10),
                dist(0.85, 0.20, 0.20, 0.15),
                dist(0.20, 0.75, 0.25, 0.15),
                dist(0.20, 0.30, 0.85, 0.15),
                dist(0.85, 0.80, 0.15, 0.15),
            ],
            texture: Texture { amplitude: 0.03, frequency: 2.0, noise: 0.03 },
            blur_sigma: [0.0, 0.0],
            jitter: ColorJitter { brightness: 0.1, contrast: 0.1, saturation: 0.1, hue: 0.02 },
        },
        DomainSpec {
            id: "dusk".into(),
            palette: vec![
                dist(0.10, 0.10, 0.16, 0.06),
                dist(0.55, 0.15, 0.28, 0.12),
                dist(0.12, 0.48, 0.32, 0.12),
                dist(0.18, 0.20, 0.62, 0.12),
                dist(0.58, 0.45, 0.10, 0.12),
            ],
            texture: Texture { amplitude: 0.06, frequency: 3.0, noise: 0.08 },
            blur_sigma: [0.0, 0.0],
            jitter: ColorJitter { brightness: 0.2, contrast: 0.2, saturation: 0.1, hue: 0.02 },
        },
        DomainSpec {
            id: "pastel".into(),
            palette: vec![
                dist(0.93, 0.91, 0.86, 0.04),
                dist(0.92, 0.58, 0.60, 0.10),
                dist(0.58, 0.85, 0.62, 0.10),
                dist(0.60, 0.66, 0.93, 0.10),
                dist(0.90, 0.86, 0.52, 0.10),
            ],
            texture: Texture { amplitude: 0.04, frequency: 1.5, noise: 0.02 },
            blur_sigma: [0.3, 0.9],
            jitter: ColorJitter { brightness: 0.1, contrast: 0.1, saturation: 0.2, hue: 0.02 },
        },
    ]
}

/// Scene geometry parameters, shared by every domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Independent placement probability of each shape class 1..=4.
    pub placement_prob: [f64; SHAPE_CLASSES],
    /// Mark 1-pixel shape outlines as ignore (and anti-alias them in the image).
    pub ignore_boundary: bool,
    /// Shape radius range as a fraction of the quadrant half-size.
    pub radius_frac: [f64; 2],
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 32,
            width: 32,
            placement_prob: [0.6; SHAPE_CLASSES],
            ignore_boundary: true,
            radius_frac: [0.55, 0.95],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::config(format!("scene size {}x{} is below the 16x16 minimum", self.height, self.width)));
        }
        if self.placement_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("placement probabilities must lie in [0,1]"));
        }
        let [lo, hi] = self.radius_frac;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config("radius_frac must satisfy 0 < lo <= hi <= 1"));
        }
        Ok(())
    }
}

/// One generated image with its label map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    /// Planar RGB `3 x H x W` in `[0,1]`.
    pub image: Vec<f64>,
    pub labels: Vec<u8>,
    pub domain_id: String,
    /// Geometry seed; the label map is a function of this alone.
    pub seed: u64,
    pub style_seed: u64,
    pub height: usize,
    pub width: usize,
}

impl SceneSample {
    pub fn to_batch(samples: &[SceneSample]) -> Result<SegBatch> {
        let first = samples.first().ok_or_else(|| Error::input("empty sample list"))?;
        let (h, w) = (first.height, first.width);
        let mut images = Vec::with_capacity(samples.len() * 3 * h * w);
        let mut labels = Vec::with_capacity(samples.len() * h * w);
        let mut domains = Vec::with_capacity(samples.len());
        for s in samples {
            if (s.height, s.width) != (h, w) {
                return Err(Error::input("samples in one batch must share a size"));
            }
            images.extend_from_slice(&s.image);
            labels.extend_from_slice(&s.labels);
            domains.push(s.domain_id.clone());
        }
        SegBatch::new(images, labels, domains, h, w)
    }
}

#[derive(Clone, Copy, Debug)]
struct Placement {
    class: u8,
    cy: f64,
    cx: f64,
    r: f64,
    aspect: f64,
}

impl Placement {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        match self.class {
            1 => dy * dy + dx * dx <= self.r * self.r,
            2 => dy.abs() <= self.r * self.aspect && dx.abs() <= self.r,
            3 => {
                // upward isosceles triangle inscribed in the radius box
                let top = self.cy - self.r;
                let t = (y - top) / (2.0 * self.r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * self.r
            }
            _ => {
                let arm = (self.r * 0.38).max(1.0);
                (dy.abs() <= self.r && dx.abs() <= arm) || (dx.abs() <= self.r && dy.abs() <= arm)
            }
        }
    }
}

/// Shapes present in a scene, chosen from the geometry seed only.
fn place_shapes(scene: &SceneConfig, geometry_seed: u64) -> Vec<Placement> {
    let mut rng = ChaCha8Rng::seed_from_u64(geometry_seed);
    let mut present: Vec<u8> =
        (0..SHAPE_CLASSES).filter(|&k| rng.gen::<f64>() < scene.placement_prob[k]).map(|k| k as u8 + 1).collect();
    if present.is_empty() {
        present.push(rng.gen_range(1..=SHAPE_CLASSES as u8));
    }
    let mut quadrants = [0usize, 1, 2, 3];
    quadrants.shuffle(&mut rng);
    let (qh, qw) = (scene.height as f64 / 2.0, scene.width as f64 / 2.0);
    let half = qh.min(qw) / 2.0;
    present
        .iter()
        .zip(quadrants)
        .map(|(&class, q)| {
            let r = half * rng.gen_range(scene.radius_frac[0]..=scene.radius_frac[1]);
            let r = r.max(2.0);
            let slack_y = (qh / 2.0 - r - 0.5).max(0.0);
            let slack_x = (qw / 2.0 - r - 0.5).max(0.0);
            let cy = (q / 2) as f64 * qh + qh / 2.0 + rng.gen_range(-slack_y..=slack_y);
            let cx = (q % 2) as f64 * qw + qw / 2.0 + rng.gen_range(-slack_x..=slack_x);
            Placement { class, cy, cx, r, aspect: rng.gen_range(0.55..=1.0) }
        })
        .collect()
}

/// Label map and boundary mask of a scene.
fn rasterize(scene: &SceneConfig, shapes: &[Placement]) -> (Vec<u8>, Vec<bool>) {
    let (h, w) = (scene.height, scene.width);
    let mut labels = vec![0u8; h * w];
    for s in shapes {
        for i in 0..h {
            for j in 0..w {
                if s.contains(i as f64 + 0.5, j as f64 + 0.5) {
                    labels[i * w + j] = s.class;
                }
            }
        }
    }
    let mut boundary = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            let l = labels[i * w + j];
            if l == 0 {
                continue;
            }
            let nb = [(i.wrapping_sub(1), j), (i + 1, j), (i, j.wrapping_sub(1)), (i, j + 1)];
            boundary[i * w + j] = nb.iter().any(|&(a, b)| a >= h || b >= w || labels[a * w + b] != l);
        }
    }
    (labels, boundary)
}

/// Draws one scene: geometry from `geometry_seed`, colours, texture, jitter
/// and blur from `spec` and `style_seed`.
pub fn generate(spec: &DomainSpec, scene: &SceneConfig, geometry_seed: u64, style_seed: u64) -> Result<SceneSample> {
    scene.validate()?;
    spec.validate()?;
    let (h, w) = (scene.height, scene.width);
    let shapes = place_shapes(scene, geometry_seed);
    let (mut labels, boundary) = rasterize(scene, &shapes);

    let mut rng = ChaCha8Rng::seed_from_u64(style_seed);
    let colors: Vec<[f64; 3]> = spec.palette.iter().map(|d| d.sample(&mut rng)).collect();
    let tex = spec.texture;
    let theta = rng.gen_range(0.0..PI);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let freq = tex.frequency * rng.gen_range(0.75..=1.25) * 2.0 * PI / w.max(h) as f64;
    let mut image = vec![0.0; 3 * h * w];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let l = labels[p] as usize;
            let mut c = colors[l];
            if boundary[p] {
                for k in 0..3 {
                    c[k] = 0.5 * (c[k] + colors[0][k]);
                }
            }
            let pattern = tex.amplitude * (freq * (j as f64 * theta.cos() + i as f64 * theta.sin()) + phase).sin();
            let noise = if tex.noise > 0.0 { rng.gen_range(-tex.noise..=tex.noise) } else { 0.0 };
            for k in 0..3 {
                image[k * h * w + p] = (c[k] + pattern + noise).clamp(0.0, 1.0);
            }
        }
    }
    spec.jitter.apply(&mut image, &mut rng);
    let [lo, hi] = spec.blur_sigma;
    if hi > 0.0 {
        photometric::gaussian_blur(&mut image, h, w, rng.gen_range(lo..=hi));
    }
    if scene.ignore_boundary {
        for (l, &b) in labels.iter_mut().zip(&boundary) {
            if b {
                *l = IGNORE_LABEL;
            }
        }
    }
    Ok(SceneSample { image, labels, domain_id: spec.id.clone(), seed: geometry_seed, style_seed, height: h, width: w })
}
