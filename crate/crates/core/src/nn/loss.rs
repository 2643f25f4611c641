use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::jdot::{cross_entropy, DistGrid, LabelBatch, LabelGrid, OutputBatch, PROB_FLOOR};

pub use super::tape::softmax_last_axis as softmax;

/// Per-level weights of the segmentation and OT terms, low level first.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLevelWeights {
    pub seg_weights: Vec<f64>,
    pub ot_weights: Vec<f64>,
}

impl Default for MultiLevelWeights {
    fn default() -> Self {
        Self {
            seg_weights: vec![0.1, 1.0],
            ot_weights: vec![0.0002, 0.001],
        }
    }
}

impl MultiLevelWeights {
    pub fn new(seg_weights: Vec<f64>, ot_weights: Vec<f64>) -> Result<Self> {
        let w = Self { seg_weights, ot_weights };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seg_weights.len() != self.ot_weights.len() {
            return Err(Error::invalid("seg and OT weights need one entry per level"));
        }
        if self.seg_weights.iter().chain(&self.ot_weights).any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("level weights must be finite and non-negative"));
        }
        if !self.seg_weights.iter().any(|w| *w > 0.0) {
            return Err(Error::invalid("at least one segmentation weight must be positive"));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.seg_weights.len()
    }

    pub fn ot_active(&self) -> bool {
        self.ot_weights.iter().any(|w| *w > 0.0)
    }
}

/// Source cross-entropy for one image (the per-level segmentation term).
pub fn seg_loss(pred: &DistGrid, labels: &LabelGrid) -> Result<f64> {
    cross_entropy(labels, pred)
}

/// `Σ_i λ_seg^i L_seg^i + Σ_i λ_OT^i L_OT^i`.
pub fn total_loss(seg_losses: &[f64], ot_losses: &[f64], weights: &MultiLevelWeights) -> Result<f64> {
    if seg_losses.len() != weights.seg_weights.len() || ot_losses.len() != weights.ot_weights.len() {
        return Err(Error::invalid(format!(
            "{} seg and {} OT losses for {} levels",
            seg_losses.len(),
            ot_losses.len(),
            weights.levels()
        )));
    }
    let seg: f64 = seg_losses.iter().zip(&weights.seg_weights).map(|(l, w)| w * l).sum();
    let ot: f64 = ot_losses.iter().zip(&weights.ot_weights).map(|(l, w)| w * l).sum();
    Ok(seg + ot)
}

/// Splits a `B × H × W × C` probability tensor into per-sample grids.
pub fn output_batch(probs: &Tensor) -> Result<OutputBatch> {
    let (b, h, w, c) = probs.dims4()?;
    let stride = h * w * c;
    let grids = (0..b)
        .map(|n| DistGrid::new(h, w, c, probs.data()[n * stride..(n + 1) * stride].to_vec()))
        .collect::<Result<_>>()?;
    OutputBatch::new(grids)
}

/// Batch mean of [`seg_loss`].
pub fn mean_seg_loss(preds: &OutputBatch, labels: &LabelBatch) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::shape(format!("{} predictions for {} label grids", preds.len(), labels.len())));
    }
    let total = preds
        .samples()
        .iter()
        .zip(labels.samples())
        .map(|(p, y)| seg_loss(p, y))
        .sum::<Result<f64>>()?;
    Ok(total / preds.len() as f64)
}

/// Gradient of [`mean_seg_loss`] with respect to the probabilities.
pub fn mean_seg_loss_gradient(preds: &OutputBatch, labels: &LabelBatch) -> Result<Vec<DistGrid>> {
    let b = preds.len() as f64;
    preds
        .samples()
        .iter()
        .zip(labels.samples())
        .map(|(p, y)| {
            let (h, w, k) = p.shape();
            let n = y.labeled_pixels();
            if n == 0 {
                return Err(Error::invalid("every pixel is ignored"));
            }
            let mut g = DistGrid::zeros(h, w, k);
            let scale = 1.0 / (b * n as f64);
            for (px, (&l, &ig)) in y.labels().iter().zip(y.ignore_mask()).enumerate() {
                let q = p.values()[px * k + l];
                if !ig && q > PROB_FLOOR {
                    g.values_mut()[px * k + l] = -scale / q;
                }
            }
            Ok(g)
        })
        .collect()
}
