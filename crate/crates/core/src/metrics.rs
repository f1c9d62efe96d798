//! Confusion matrix, per-class IoU and mean IoU.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{HardLabelMap, IGNORE_LABEL};

/// `counts[truth * classes + pred]`. Pixels whose prediction is the ignore
/// label are tallied per truth class in `unassigned` and count as misses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    unassigned: Vec<u64>,
    ignored: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IouReport {
    /// `None` where the class appears in neither prediction nor truth.
    pub per_class: Vec<Option<f64>>,
    /// Same values with undefined classes reported as 0.
    pub per_class_zero: Vec<f64>,
    /// Mean over defined classes.
    pub miou: f64,
    /// Mean over all classes with undefined ones as 0.
    pub miou_all: f64,
    pub pixels: u64,
    pub ignored: u64,
    pub pixel_accuracy: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            unassigned: vec![0; classes],
            ignored: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    /// Evaluated (non-ignored truth) pixels.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.unassigned.iter().sum::<u64>()
    }

    pub fn accumulate(&mut self, pred: &HardLabelMap, truth: &HardLabelMap) -> Result<()> {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(Error::shape(
                "ConfusionMatrix::accumulate",
                (truth.height(), truth.width()),
                (pred.height(), pred.width()),
            ));
        }
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            if t == IGNORE_LABEL {
                self.ignored += 1;
                continue;
            }
            let t = t as usize;
            if t >= self.classes {
                return Err(Error::InvalidArgument(format!("truth label {t} out of range")));
            }
            if p == IGNORE_LABEL {
                self.unassigned[t] += 1;
            } else if (p as usize) < self.classes {
                self.counts[t * self.classes + p as usize] += 1;
            } else {
                return Err(Error::InvalidArgument(format!("predicted label {p} out of range")));
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("ConfusionMatrix::merge", self.classes, other.classes));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.unassigned
            .iter_mut()
            .zip(&other.unassigned)
            .for_each(|(a, b)| *a += b);
        self.ignored += other.ignored;
        Ok(())
    }

    pub fn iou(&self) -> IouReport {
        let c = self.classes;
        let mut per_class = Vec::with_capacity(c);
        for k in 0..c {
            let tp = self.get(k, k);
            let row: u64 = (0..c).map(|p| self.get(k, p)).sum::<u64>() + self.unassigned[k];
            let col: u64 = (0..c).map(|t| self.get(t, k)).sum();
            let union = row + col - tp;
            per_class.push((union > 0).then(|| tp as f64 / union as f64));
        }
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        let per_class_zero: Vec<f64> = per_class.iter().map(|v| v.unwrap_or(0.0)).collect();
        let miou_all = per_class_zero.iter().sum::<f64>() / c.max(1) as f64;
        let pixels = self.total();
        let correct: u64 = (0..c).map(|k| self.get(k, k)).sum();
        IouReport {
            per_class,
            per_class_zero,
            miou,
            miou_all,
            pixels,
            ignored: self.ignored,
            pixel_accuracy: if pixels > 0 {
                correct as f64 / pixels as f64
            } else {
                0.0
            },
        }
    }
}

impl IouReport {
    /// `{per_class: {name: iou|null}, miou, pixels, ignored, ...}`.
    pub fn to_json(&self, names: &[String]) -> serde_json::Value {
        let per_class: serde_json::Map<String, serde_json::Value> = names
            .iter()
            .zip(&self.per_class)
            .map(|(n, v)| (n.clone(), serde_json::json!(v)))
            .collect();
        let per_class_zero: serde_json::Map<String, serde_json::Value> = names
            .iter()
            .zip(&self.per_class_zero)
            .map(|(n, v)| (n.clone(), serde_json::json!(v)))
            .collect();
        serde_json::json!({
            "per_class": per_class,
            "miou": self.miou,
            "pixels": self.pixels,
            "ignored": self.ignored,
            "per_class_zero_if_absent": per_class_zero,
            "miou_zero_if_absent": self.miou_all,
            "pixel_accuracy": self.pixel_accuracy,
        })
    }
}

/// Confusion matrix over a list of (prediction, truth) pairs.
pub fn evaluate(classes: usize, pairs: &[(HardLabelMap, HardLabelMap)]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    for (p, t) in pairs {
        cm.accumulate(p, t)?;
    }
    Ok(cm)
}
