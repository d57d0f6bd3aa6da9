use crate::error::{Error, Result};
use crate::graph::Tensor;

/// Label value excluded from every loss and metric.
pub const IGNORE_LABEL: u8 = 255;

/// Images (`B x 3 x H x W`, values in `[0,1]`) with per-pixel labels
/// (`B x H x W`) and the domain each sample came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SegBatch {
    pub images: Vec<f64>,
    pub labels: Vec<u8>,
    pub domains: Vec<String>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl SegBatch {
    pub fn new(images: Vec<f64>, labels: Vec<u8>, domains: Vec<String>, height: usize, width: usize) -> Result<Self> {
        let batch = domains.len();
        if images.len() != batch * 3 * height * width || labels.len() != batch * height * width {
            return Err(Error::input(format!(
                "batch of {batch} at {height}x{width} needs {} image values and {} labels, got {} and {}",
                batch * 3 * height * width,
                batch * height * width,
                images.len(),
                labels.len()
            )));
        }
        Ok(SegBatch { images, labels, domains, batch, height, width })
    }

    pub fn image_tensor(&self) -> Tensor {
        Tensor::new(self.images.clone(), &[self.batch, 3, self.height, self.width]).expect("validated on construction")
    }

    /// Concatenates along the batch axis.
    pub fn concat(parts: &[SegBatch]) -> Result<SegBatch> {
        let first = parts.first().ok_or_else(|| Error::input("concat of zero batches"))?;
        let mut out = SegBatch { images: vec![], labels: vec![], domains: vec![], batch: 0, ..first.clone() };
        for p in parts {
            if (p.height, p.width) != (first.height, first.width) {
                return Err(Error::input("cannot concatenate batches of different image sizes"));
            }
            out.images.extend_from_slice(&p.images);
            out.labels.extend_from_slice(&p.labels);
            out.domains.extend(p.domains.iter().cloned());
            out.batch += p.batch;
        }
        Ok(out)
    }

    /// Single sample `i` as a batch of one.
    pub fn sample(&self, i: usize) -> SegBatch {
        let (hw, chw) = (self.height * self.width, 3 * self.height * self.width);
        SegBatch {
            images: self.images[i * chw..(i + 1) * chw].to_vec(),
            labels: self.labels[i * hw..(i + 1) * hw].to_vec(),
            domains: vec![self.domains[i].clone()],
            batch: 1,
            height: self.height,
            width: self.width,
        }
    }

    pub fn counted_pixels(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_LABEL).count()
    }

    /// Nearest-neighbour label downsampling (top-left pixel of each block).
    pub fn downsampled_labels(&self, factor: usize) -> Vec<u8> {
        downsample_labels(&self.labels, self.batch, self.height, self.width, factor)
    }
}

pub fn downsample_labels(labels: &[u8], batch: usize, h: usize, w: usize, factor: usize) -> Vec<u8> {
    let (ho, wo) = (h / factor, w / factor);
    let mut out = Vec::with_capacity(batch * ho * wo);
    for b in 0..batch {
        for i in 0..ho {
            for j in 0..wo {
                out.push(labels[(b * h + i * factor) * w + j * factor]);
            }
        }
    }
    out
}

/// Constant one-hot tensor `B x N x H x W`; ignore pixels get an all-zero column.
pub fn one_hot(labels: &[u8], batch: usize, classes: usize, h: usize, w: usize) -> Result<Tensor> {
    let hw = h * w;
    let mut data = vec![0.0; batch * classes * hw];
    for b in 0..batch {
        for p in 0..hw {
            let l = labels[b * hw + p];
            if l == IGNORE_LABEL {
                continue;
            }
            if l as usize >= classes {
                return Err(Error::input(format!("label {l} outside 0..{classes}")));
            }
            data[(b * classes + l as usize) * hw + p] = 1.0;
        }
    }
    Ok(Tensor::new(data, &[batch, classes, h, w])?)
}
