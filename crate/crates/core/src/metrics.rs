//! Dice overlap and Hausdorff surface distance, plus dataset-level reports.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::SegSample;
use crate::error::{contract_err, DtsError, Result};

/// Foreground indicator of one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask(pub Array2<bool>);

impl BinaryMask {
    pub fn from_labels(labels: ArrayView2<u8>, class: u8) -> Self {
        Self(labels.mapv(|l| l == class))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&v| v)
    }
}

fn same_shape(y: &BinaryMask, p: &BinaryMask) -> Result<()> {
    if y.dim() != p.dim() {
        return Err(contract_err!(
            "mask shapes {:?} and {:?} differ",
            y.dim(),
            p.dim()
        ));
    }
    Ok(())
}

/// `2|Y∩P| / (|Y| + |P|)`, and 1 when both masks are empty.
pub fn dice(y: &BinaryMask, p: &BinaryMask) -> Result<f64> {
    same_shape(y, p)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&a, &b) in y.0.iter().zip(p.0.iter()) {
        inter += (a && b) as usize;
        total += a as usize + b as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Foreground pixels with a background or out-of-bounds 4-neighbour.
pub fn surface(y: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = y.dim();
    let m = &y.0;
    let mut out = Vec::new();
    for ((i, j), &v) in m.indexed_iter() {
        if !v {
            continue;
        }
        let edge = i == 0
            || j == 0
            || i + 1 == h
            || j + 1 == w
            || !m[[i - 1, j]]
            || !m[[i + 1, j]]
            || !m[[i, j - 1]]
            || !m[[i, j + 1]];
        if edge {
            out.push((i, j));
        }
    }
    out
}

fn directed(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    let mut worst = 0i64;
    for &(ai, aj) in a {
        let mut best = i64::MAX;
        for &(bi, bj) in b {
            let (di, dj) = (ai as i64 - bi as i64, aj as i64 - bj as i64);
            best = best.min(di * di + dj * dj);
        }
        worst = worst.max(best);
    }
    (worst as f64).sqrt()
}

/// Symmetric Hausdorff distance between the two masks' surfaces, in pixels.
pub fn hausdorff(y: &BinaryMask, p: &BinaryMask) -> Result<f64> {
    same_shape(y, p)?;
    if y.is_empty() || p.is_empty() {
        return Err(DtsError::UndefinedMetric(
            "Hausdorff distance of an empty mask".into(),
        ));
    }
    let (sy, sp) = (surface(y), surface(p));
    Ok(directed(&sy, &sp).max(directed(&sp, &sy)))
}

/// Per-class results averaged over images; classes are the foreground ids `1..C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_images: usize,
    pub classes: Vec<usize>,
    pub dice: Vec<f64>,
    /// `None` when every image skipped the class.
    pub hausdorff: Vec<Option<f64>>,
    /// Images where the class was empty in the prediction or the truth.
    pub hausdorff_skipped: Vec<usize>,
    pub mean_dice: f64,
    /// Mean over classes with at least one defined distance.
    pub mean_hausdorff: Option<f64>,
}

impl MetricsReport {
    /// Aggregates per-image `(truth, prediction)` label maps.
    pub fn from_predictions(
        pairs: &[(ArrayView2<u8>, ArrayView2<u8>)],
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(contract_err!(
                "need a foreground class, got {num_classes} classes"
            ));
        }
        let classes: Vec<usize> = (1..num_classes).collect();
        let mut dice_sum = vec![0.0; classes.len()];
        let mut hd_sum = vec![0.0; classes.len()];
        let mut hd_n = vec![0usize; classes.len()];
        let mut skipped = vec![0usize; classes.len()];
        for (truth, pred) in pairs {
            for (k, &c) in classes.iter().enumerate() {
                let y = BinaryMask::from_labels(*truth, c as u8);
                let p = BinaryMask::from_labels(*pred, c as u8);
                dice_sum[k] += dice(&y, &p)?;
                match hausdorff(&y, &p) {
                    Ok(d) => {
                        hd_sum[k] += d;
                        hd_n[k] += 1;
                    }
                    Err(DtsError::UndefinedMetric(_)) => skipped[k] += 1,
                    Err(e) => return Err(e),
                }
            }
        }
        let n = pairs.len().max(1) as f64;
        let dice: Vec<f64> = dice_sum.iter().map(|s| s / n).collect();
        let hausdorff: Vec<Option<f64>> = hd_sum
            .iter()
            .zip(&hd_n)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect();
        let defined: Vec<f64> = hausdorff.iter().flatten().copied().collect();
        Ok(Self {
            num_images: pairs.len(),
            mean_dice: dice.iter().sum::<f64>() / dice.len() as f64,
            mean_hausdorff: (!defined.is_empty())
                .then(|| defined.iter().sum::<f64>() / defined.len() as f64),
            classes,
            dice,
            hausdorff,
            hausdorff_skipped: skipped,
        })
    }
}

/// Anything that turns a batch of images into label maps.
pub trait Segmenter {
    fn num_classes(&self) -> usize;

    /// `offset` is the index of the first sample within the evaluated set,
    /// so stochastic segmenters can derive per-batch seeds.
    fn segment(&self, batch: &[&SegSample], offset: usize) -> Result<Vec<Array2<u8>>>;
}

/// Predicts the ground truth it is given.
pub struct OracleSegmenter {
    pub num_classes: usize,
}

impl Segmenter for OracleSegmenter {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn segment(&self, batch: &[&SegSample], _offset: usize) -> Result<Vec<Array2<u8>>> {
        Ok(batch.iter().map(|s| s.label.clone()).collect())
    }
}

/// Labels every pixel as background.
pub struct BackgroundSegmenter {
    pub num_classes: usize,
}

impl Segmenter for BackgroundSegmenter {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn segment(&self, batch: &[&SegSample], _offset: usize) -> Result<Vec<Array2<u8>>> {
        Ok(batch.iter().map(|s| Array2::zeros(s.label.dim())).collect())
    }
}

/// Segments `samples` in batches of `batch_size` and scores them against their labels.
pub fn evaluate<S: Segmenter + ?Sized>(
    segmenter: &S,
    samples: &[&SegSample],
    batch_size: usize,
) -> Result<MetricsReport> {
    if batch_size == 0 {
        return Err(contract_err!("batch size must be positive"));
    }
    let mut preds = Vec::with_capacity(samples.len());
    for (k, chunk) in samples.chunks(batch_size).enumerate() {
        let out = segmenter.segment(chunk, k * batch_size)?;
        if out.len() != chunk.len() {
            return Err(contract_err!(
                "segmenter returned {} maps for {} images",
                out.len(),
                chunk.len()
            ));
        }
        preds.extend(out);
    }
    let pairs: Vec<_> = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| (s.label.view(), p.view()))
        .collect();
    MetricsReport::from_predictions(&pairs, segmenter.num_classes())
}
