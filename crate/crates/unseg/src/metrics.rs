//! Confusion-count accumulation and the three evaluation metrics.
//!
//! Two aggregations ship side by side and every report labels which one it
//! used:
//!
//! * **micro** - pool pixel counts globally, then compute Dice / Jaccard.
//! * **per_image_mean** - compute crack-class IoU per image and average;
//!   this is what `miou` reports. Crack-free images compared against
//!   crack-free predictions count as 1.0.

use std::fmt;

use crate::augment::MaskBuf;
use crate::error::{Error, Result};

/// Pixel-level confusion counts; additive under [`ConfusionCounts::merge`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

/// Count prediction-vs-ground-truth agreement into `counts`.
pub fn accumulate(
    counts: &mut ConfusionCounts,
    pred: &MaskBuf,
    gt: &MaskBuf,
) -> Result<()> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::ShapeMismatch(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        match (p != 0, g != 0) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fp += 1,
            (false, true) => counts.fn_ += 1,
            (false, false) => counts.tn += 1,
        }
    }
    Ok(())
}

/// Dice = 2 TP / (2 TP + FP + FN); empty-vs-empty is 1.0 by convention.
pub fn dice(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * c.tp as f64 / denom as f64
    }
}

/// Jaccard = TP / (TP + FP + FN); empty-vs-empty is 1.0 by convention.
pub fn jaccard(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}

/// Per-image mean crack-class IoU.
pub fn miou(per_image: &[ConfusionCounts]) -> Result<f64> {
    if per_image.is_empty() {
        return Err(Error::EmptyList);
    }
    Ok(per_image.iter().map(jaccard).sum::<f64>() / per_image.len() as f64)
}

/// Which pooling produced a [`MetricsReport`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Micro,
    PerImageMean,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregation::Micro => write!(f, "micro"),
            Aggregation::PerImageMean => write!(f, "per_image_mean"),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MetricsReport {
    pub miou: f64,
    pub dice: f64,
    pub jaccard: f64,
    pub aggregation: Aggregation,
    pub n_images: usize,
}

/// Build both aggregation variants from per-image counts.
///
/// `miou` is always the per-image mean crack IoU; the micro report carries
/// it alongside globally pooled Dice / Jaccard, the per-image report averages
/// all three per image.
pub fn reports(per_image: &[ConfusionCounts]) -> Result<(MetricsReport, MetricsReport)> {
    if per_image.is_empty() {
        return Err(Error::EmptyList);
    }
    let n = per_image.len();
    let pooled = per_image
        .iter()
        .fold(ConfusionCounts::default(), |acc, c| acc.merge(c));
    let mean_iou = miou(per_image)?;
    let micro = MetricsReport {
        miou: mean_iou,
        dice: dice(&pooled),
        jaccard: jaccard(&pooled),
        aggregation: Aggregation::Micro,
        n_images: n,
    };
    let per = MetricsReport {
        miou: mean_iou,
        dice: per_image.iter().map(dice).sum::<f64>() / n as f64,
        jaccard: mean_iou,
        aggregation: Aggregation::PerImageMean,
        n_images: n,
    };
    Ok((micro, per))
}

/// Header of the line-delimited record format every run emits.
pub const RECORD_HEADER: &str = "split,model,augment,loss,miou,dice,jaccard,aggregation";

/// One line of the record format.
pub fn record_line(
    split: &str,
    model: &str,
    augment: &str,
    loss: f64,
    report: &MetricsReport,
) -> String {
    format!(
        "{split},{model},{augment},{loss:.6},{:.6},{:.6},{:.6},{}",
        report.miou, report.dice, report.jaccard, report.aggregation
    )
}
