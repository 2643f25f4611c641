//! Confusion matrix, per-class IoU and mean IoU.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `counts[g][p]`: pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("confusion matrix needs at least one class"));
        }
        Ok(Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        self.accumulate_masked(pred, gt, None)
    }

    /// Pixels with `ignore[i] == true` are skipped.
    pub fn accumulate_masked(&mut self, pred: &[usize], gt: &[usize], ignore: Option<&[bool]>) -> Result<()> {
        if pred.len() != gt.len() || ignore.is_some_and(|m| m.len() != gt.len()) {
            return Err(Error::shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.num_classes;
        // validate before touching counts so a rejected grid leaves the matrix unchanged
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if ignore.is_some_and(|m| m[i]) {
                continue;
            }
            if p >= k || g >= k {
                return Err(Error::invalid(format!("class id {} out of range for {k} classes", p.max(g))));
            }
        }
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if !ignore.is_some_and(|m| m[i]) {
                self.counts[g * k + p] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("confusion matrices have different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class; `None` for classes absent from both ground truth and prediction.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.count(c, c);
                let row: u64 = (0..k).map(|p| self.count(c, p)).sum();
                let col: u64 = (0..k).map(|g| self.count(g, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        self.miou_subset(None)
    }

    /// Mean IoU over present classes, restricted to `include` when given.
    pub fn miou_subset(&self, include: Option<&[usize]>) -> Result<f64> {
        let ious = self.iou_per_class();
        if let Some(&c) = include.and_then(|inc| inc.iter().find(|&&c| c >= self.num_classes)) {
            return Err(Error::invalid(format!("included class {c} out of range")));
        }
        let selected: Vec<f64> = ious
            .iter()
            .enumerate()
            .filter(|(c, _)| include.map_or(true, |inc| inc.contains(c)))
            .filter_map(|(_, v)| *v)
            .collect();
        if selected.is_empty() {
            return Err(Error::invalid("every class is absent; mIoU is undefined"));
        }
        Ok(selected.iter().sum::<f64>() / selected.len() as f64)
    }
}

/// `iteration,miou,iou_class_0,...`
pub fn metrics_csv_header(num_classes: usize) -> String {
    let mut s = String::from("iteration,miou");
    for c in 0..num_classes {
        let _ = write!(s, ",iou_class_{c}");
    }
    s
}

/// One CSV row; absent classes are written as `nan`.
pub fn metrics_csv_row(iteration: usize, cm: &ConfusionMatrix) -> Result<String> {
    let mut s = format!("{iteration},{}", cm.miou()?);
    for v in cm.iou_per_class() {
        match v {
            Some(v) => {
                let _ = write!(s, ",{v}");
            }
            None => s.push_str(",nan"),
        }
    }
    Ok(s)
}
