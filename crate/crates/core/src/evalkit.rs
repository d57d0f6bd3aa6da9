//! Confusion matrices, mIoU, memory-activation heatmaps and multi-seed summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::batch::{SegBatch, IGNORE_LABEL};
use crate::domains::SceneSample;
use crate::error::{Error, Result};
use crate::episodic::{infer, predict_logits};
use crate::graph::{no_grad, ParamValues};
use crate::memory::{self, MemoryMatrix};
use crate::nets::SegNet;
use crate::raster;

/// `counts[g][p]`: pixels of ground-truth class `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every non-ignore pixel. Validates the whole input before
    /// touching any count.
    pub fn accumulate(&mut self, labels: &[u8], predictions: &[u8]) -> Result<()> {
        if labels.len() != predictions.len() {
            return Err(Error::input(format!(
                "{} labels vs {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let n = self.num_classes;
        for (&g, &p) in labels.iter().zip(predictions) {
            if g != IGNORE_LABEL && (g as usize >= n || p as usize >= n) {
                return Err(Error::input(format!("class id out of range for {n} classes (truth {g}, prediction {p})")));
            }
        }
        for (&g, &p) in labels.iter().zip(predictions) {
            if g != IGNORE_LABEL {
                self.counts[g as usize * n + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::input("cannot merge confusion matrices of different sizes"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Simultaneous relabeling of rows and columns: class `k` becomes `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> ConfusionMatrix {
        let n = self.num_classes;
        let mut out = ConfusionMatrix::new(n);
        for g in 0..n {
            for p in 0..n {
                out.counts[perm[g] * n + perm[p]] = self.get(g, p);
            }
        }
        out
    }
}

/// Per-class IoU (`None` where the class is neither present nor predicted)
/// and the mean over present classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn miou(cm: &ConfusionMatrix) -> Result<IouReport> {
    let n = cm.num_classes;
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|k| {
            let tp = cm.get(k, k);
            let fn_: u64 = (0..n).filter(|&p| p != k).map(|p| cm.get(k, p)).sum();
            let fp: u64 = (0..n).filter(|&g| g != k).map(|g| cm.get(g, k)).sum();
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::input("mIoU undefined: every class is absent"));
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouReport { per_class, mean })
}

/// Confusion matrix of the committed model over a sample set, in chunks.
pub fn evaluate(
    net: &SegNet,
    params: &ParamValues,
    memory: Option<&MemoryMatrix>,
    samples: &[SceneSample],
    chunk: usize,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(net.config().num_classes);
    for part in samples.chunks(chunk.max(1)) {
        let batch = SceneSample::to_batch(part)?;
        let pred = infer(net, params, memory, &batch)?;
        cm.accumulate(&batch.labels, &pred)?;
    }
    Ok(cm)
}

/// Memory read weights of one image, one `H' x W'` map per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMaps {
    pub height: usize,
    pub width: usize,
    /// `maps[n][i * width + j]`.
    pub maps: Vec<Vec<f64>>,
    /// Fraction of feature pixels whose argmax over maps equals the model's
    /// prediction at that (downsampled) pixel.
    pub agreement: f64,
}

impl ActivationMaps {
    pub fn max_channel_sum_error(&self) -> f64 {
        (0..self.height * self.width)
            .map(|p| (self.maps.iter().map(|m| m[p]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Writes `<image_id>_class<n>.pgm` for every class; returns the paths.
    pub fn write_pgms(&self, dir: &Path, image_id: &str) -> Result<Vec<PathBuf>> {
        self.maps
            .iter()
            .enumerate()
            .map(|(n, m)| {
                let path = dir.join(format!("{image_id}_class{n}.pgm"));
                raster::write_file(&path, &raster::encode_pgm_unit(m, self.height, self.width))?;
                Ok(path)
            })
            .collect()
    }
}

pub fn activation_maps(net: &SegNet, params: &ParamValues, memory: &MemoryMatrix, sample: &SegBatch) -> Result<ActivationMaps> {
    if !net.config().read_memory {
        return Err(Error::input("activation maps need a network with the memory read path"));
    }
    let sample = sample.sample(0);
    let images = sample.image_tensor();
    let p = params.to_constants();
    let w = no_grad(|| -> Result<_> {
        let f = net.encode(&p, &images)?;
        memory::read_weights(&memory.to_tensor(), &f)
    })?;
    let (n, h, wd) = (w.shape()[1], w.shape()[2], w.shape()[3]);
    let maps: Vec<Vec<f64>> = (0..n).map(|k| w.data()[k * h * wd..(k + 1) * h * wd].to_vec()).collect();

    let s = net.config().output_stride;
    let pred = crate::losses::argmax_labels(&predict_logits(net, params, Some(memory), &images)?);
    let pred_small = crate::batch::downsample_labels(&pred, 1, sample.height, sample.width, s);
    let agree = (0..h * wd)
        .filter(|&p| {
            let best = (0..n).max_by(|&a, &b| maps[a][p].total_cmp(&maps[b][p])).unwrap_or(0);
            best == pred_small[p] as usize
        })
        .count();
    Ok(ActivationMaps { height: h, width: wd, maps, agreement: agree as f64 / (h * wd) as f64 })
}

/// One evaluated (configuration, seed, domain) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config_id: String,
    pub seed: u64,
    pub domain: String,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

impl RunResult {
    pub fn csv_header(num_classes: usize) -> String {
        let mut h = String::from("config_id,seed,domain,miou");
        for k in 0..num_classes {
            let _ = write!(h, ",iou_class{k}");
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut row = format!("{},{},{},{:.6}", self.config_id, self.seed, self.domain, self.miou);
        for v in &self.per_class {
            match v {
                Some(x) => {
                    let _ = write!(row, ",{x:.6}");
                }
                None => row.push(','),
            }
        }
        row
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config_id: String,
    pub domain: String,
    pub runs: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub num_classes: usize,
    pub runs: Vec<RunResult>,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn row(&self, config_id: &str, domain: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.config_id == config_id && r.domain == domain)
    }

    /// Per-run CSV in the documented schema.
    pub fn runs_csv(&self) -> String {
        let mut out = RunResult::csv_header(self.num_classes);
        out.push('\n');
        for r in &self.runs {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<20} {:<12} {:>4} {:>8} {:>8} {:>8}\n", "config", "domain", "runs", "mean", "min", "max");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<20} {:<12} {:>4} {:>8.4} {:>8.4} {:>8.4}",
                r.config_id, r.domain, r.runs, r.mean, r.min, r.max
            );
        }
        out
    }
}

/// Aggregates per-seed results into mean/min/max per (configuration, domain).
/// All runs must agree on the class count, and no (configuration, seed,
/// domain) cell may appear twice.
pub fn summarize(runs: &[RunResult]) -> Result<Summary> {
    let first = runs.first().ok_or_else(|| Error::input("nothing to summarize"))?;
    let num_classes = first.per_class.len();
    let mut cells = BTreeMap::<(String, String), Vec<f64>>::new();
    let mut seen = std::collections::HashSet::new();
    for r in runs {
        if r.per_class.len() != num_classes {
            return Err(Error::input(format!(
                "run {}/{} has {} classes, expected {num_classes}",
                r.config_id,
                r.seed,
                r.per_class.len()
            )));
        }
        if !seen.insert((r.config_id.clone(), r.seed, r.domain.clone())) {
            return Err(Error::input(format!("duplicate run {}/{}/{}", r.config_id, r.seed, r.domain)));
        }
        cells.entry((r.config_id.clone(), r.domain.clone())).or_default().push(r.miou);
    }
    let rows = cells
        .into_iter()
        .map(|((config_id, domain), v)| SummaryRow {
            config_id,
            domain,
            runs: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();
    Ok(Summary { num_classes, runs: runs.to_vec(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_diagonal() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(1, 1), cm.get(2, 2), cm.total()), (1, 1, 2, 4));
        assert_eq!(miou(&cm).unwrap().mean, 1.0);
    }

    #[test]
    fn ignore_only_leaves_matrix_unchanged() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[IGNORE_LABEL; 4], &[1, 0, 1, 0]).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(2));
    }

    #[test]
    fn one_error_fixture() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        assert_eq!([cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)], [1, 1, 0, 2]);
    }

    #[test]
    fn constant_prediction_half_split() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap();
        let r = miou(&cm).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(0.0)]);
        assert_eq!(r.mean, 0.25);
    }

    #[test]
    fn absent_class_excluded() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1], &[0, 1]).unwrap();
        let r = miou(&cm).unwrap();
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.mean, 1.0);
        assert!(miou(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn out_of_range_rejected_atomically() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&[0, 2], &[0, 0]).is_err());
        assert!(cm.accumulate(&[0, 1], &[0, 5]).is_err());
        assert_eq!(cm.total(), 0);
    }

    fn run(config: &str, seed: u64, m: f64) -> RunResult {
        RunResult { config_id: config.into(), seed, domain: "d".into(), miou: m, per_class: vec![Some(m), None] }
    }

    #[test]
    fn summary_statistics() {
        let s = summarize(&[run("a", 0, 0.4), run("a", 1, 0.6), run("b", 0, 0.3)]).unwrap();
        let a = s.row("a", "d").unwrap();
        assert!((a.mean - 0.5).abs() < 1e-15);
        assert_eq!((a.min, a.max), (0.4, 0.6));
        let b = s.row("b", "d").unwrap();
        assert_eq!((b.mean, b.min, b.max), (0.3, 0.3, 0.3));
        assert!(s.runs_csv().starts_with("config_id,seed,domain,miou,iou_class0,iou_class1\n"));
    }

    #[test]
    fn summary_rejects_mixed_runs() {
        let mut bad = run("a", 1, 0.5);
        bad.per_class.push(None);
        assert!(summarize(&[run("a", 0, 0.4), bad]).is_err());
        assert!(summarize(&[run("a", 0, 0.4), run("a", 0, 0.5)]).is_err());
        assert!(summarize(&[]).is_err());
    }
}
