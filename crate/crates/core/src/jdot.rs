//! Joint output/label transport cost and the OT alignment loss.
//!
//! Pairwise distances between a source and a target segmentation output
//! combine a KL term on the class distributions with a cross-entropy term
//! that scores the target prediction against the source labels. Both are
//! averaged over pixels so that magnitudes do not depend on image size.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::ot::{frobenius_inner, CostMatrix, TransportPlan};

/// Probabilities are floored here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Per-pixel class distributions for one image, stored `H × W × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistGrid {
    height: usize,
    width: usize,
    classes: usize,
    values: Vec<f64>,
}

impl DistGrid {
    pub fn new(height: usize, width: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        let grid = Self::new_unchecked(height, width, classes, values)?;
        for (px, dist) in grid.values.chunks(classes).enumerate() {
            if dist.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::invalid(format!("pixel {px} has a probability outside [0, 1]")));
            }
            let total: f64 = dist.iter().sum();
            if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
                return Err(Error::invalid(format!("pixel {px} probabilities sum to {total}")));
            }
        }
        Ok(grid)
    }

    /// Only the shape is checked. Used for gradient grids, which live in
    /// the same layout but are not distributions.
    pub fn new_unchecked(height: usize, width: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || classes == 0 {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        if values.len() != height * width * classes {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width}x{classes} grid",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, classes: usize) -> Self {
        Self {
            height,
            width,
            classes,
            values: vec![0.0; height * width * classes],
        }
    }

    pub fn uniform(height: usize, width: usize, classes: usize) -> Self {
        Self {
            height,
            width,
            classes,
            values: vec![1.0 / classes as f64; height * width * classes],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.classes)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Class distribution at pixel index `px` (row-major).
    pub fn pixel(&self, px: usize) -> &[f64] {
        &self.values[px * self.classes..(px + 1) * self.classes]
    }

    /// Most probable class per pixel; ties go to the lower class id.
    pub fn argmax(&self) -> Vec<usize> {
        self.values
            .chunks(self.classes)
            .map(|d| {
                d.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &p)| if p > best.1 { (c, p) } else { best })
                    .0
            })
            .collect()
    }
}

/// Ground-truth classes for one image with an ignore mask.
///
/// Stored as class ids; the one-hot view is [`LabelGrid::one_hot`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    classes: usize,
    labels: Vec<usize>,
    ignore: Vec<bool>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<usize>, ignore: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || classes == 0 {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        if labels.len() != height * width || ignore.len() != labels.len() {
            return Err(Error::shape(format!(
                "label grid {height}x{width} given {} labels and {} mask flags",
                labels.len(),
                ignore.len()
            )));
        }
        if let Some((px, l)) = labels
            .iter()
            .zip(&ignore)
            .enumerate()
            .find(|(_, (l, ig))| !**ig && **l >= classes)
        {
            return Err(Error::invalid(format!("pixel {px} has class {} >= {classes}", l.0)));
        }
        Ok(Self {
            height,
            width,
            classes,
            labels,
            ignore,
        })
    }

    /// A fully labeled grid.
    pub fn from_classes(height: usize, width: usize, classes: usize, labels: Vec<usize>) -> Result<Self> {
        let n = labels.len();
        Self::new(height, width, classes, labels, vec![false; n])
    }

    /// Builds a grid from `H × W × C` one-hot values; pixels flagged in
    /// `ignore` may hold anything.
    pub fn from_one_hot(height: usize, width: usize, classes: usize, one_hot: &[f64], ignore: Vec<bool>) -> Result<Self> {
        if one_hot.len() != height * width * classes || ignore.len() != height * width {
            return Err(Error::shape("one-hot grid does not match its dimensions"));
        }
        let mut labels = Vec::with_capacity(height * width);
        for (px, (v, &ig)) in one_hot.chunks(classes).zip(&ignore).enumerate() {
            if ig {
                labels.push(0);
                continue;
            }
            let hot: Vec<usize> = (0..classes).filter(|&c| v[c] == 1.0).collect();
            let cold = v.iter().filter(|&&x| x == 0.0).count();
            if hot.len() != 1 || cold != classes - 1 {
                return Err(Error::invalid(format!("pixel {px} is not one-hot")));
            }
            labels.push(hot[0]);
        }
        Self::new(height, width, classes, labels, ignore)
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.labels.len() * self.classes];
        for (px, (&l, &ig)) in self.labels.iter().zip(&self.ignore).enumerate() {
            if !ig {
                out[px * self.classes + l] = 1.0;
            }
        }
        out
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.classes)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ignore_mask(&self) -> &[bool] {
        &self.ignore
    }

    pub fn labeled_pixels(&self) -> usize {
        self.ignore.iter().filter(|i| !**i).count()
    }
}

/// Segmentation outputs of a batch; every sample shares one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputBatch {
    samples: Vec<DistGrid>,
}

impl OutputBatch {
    pub fn new(samples: Vec<DistGrid>) -> Result<Self> {
        check_uniform(samples.iter().map(DistGrid::shape))?;
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[DistGrid] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.samples[0].shape()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    samples: Vec<LabelGrid>,
}

impl LabelBatch {
    pub fn new(samples: Vec<LabelGrid>) -> Result<Self> {
        check_uniform(samples.iter().map(LabelGrid::shape))?;
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[LabelGrid] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn check_uniform(mut shapes: impl Iterator<Item = (usize, usize, usize)>) -> Result<()> {
    let first = shapes.next().ok_or_else(|| Error::invalid("batch is empty"))?;
    if let Some(other) = shapes.find(|s| *s != first) {
        return Err(Error::shape(format!("batch mixes shapes {first:?} and {other:?}")));
    }
    Ok(())
}

/// Weights of the output-space and label-space terms of the joint cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointCostConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for JointCostConfig {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 1.0 }
    }
}

impl JointCostConfig {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let cfg = Self { alpha, beta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !(self.alpha + self.beta > 0.0) {
            return Err(Error::invalid(format!(
                "alpha={} and beta={} must be non-negative with a positive sum",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Pixel-averaged `Σ_c p log(p/q)`.
pub fn kl_divergence(p: &DistGrid, q: &DistGrid) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::shape(format!("KL between {:?} and {:?}", p.shape(), q.shape())));
    }
    let total: f64 = p
        .values
        .iter()
        .zip(&q.values)
        .filter(|(a, _)| **a > 0.0)
        .map(|(&a, &b)| a * (a.ln() - b.max(PROB_FLOOR).ln()))
        .sum();
    Ok(total / p.pixels() as f64)
}

/// Mean `−log p[true class]` over non-ignored pixels.
pub fn cross_entropy(y: &LabelGrid, p: &DistGrid) -> Result<f64> {
    if y.shape() != p.shape() {
        return Err(Error::shape(format!("labels {:?} vs prediction {:?}", y.shape(), p.shape())));
    }
    let n = y.labeled_pixels();
    if n == 0 {
        return Err(Error::invalid("every pixel is ignored"));
    }
    let k = p.classes;
    let total: f64 = y
        .labels
        .iter()
        .zip(&y.ignore)
        .enumerate()
        .filter(|(_, (_, ig))| !**ig)
        .map(|(px, (&l, _))| -p.values[px * k + l].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / n as f64)
}

fn check_batches(ps: &OutputBatch, ys: &LabelBatch, pt: &OutputBatch) -> Result<()> {
    if ps.len() != ys.len() {
        return Err(Error::shape(format!("{} source outputs but {} label grids", ps.len(), ys.len())));
    }
    if ps.shape() != pt.shape() || ps.shape() != ys.samples[0].shape() {
        return Err(Error::shape(format!(
            "source {:?}, labels {:?} and target {:?} outputs differ",
            ps.shape(),
            ys.samples[0].shape(),
            pt.shape()
        )));
    }
    Ok(())
}

/// `D_ij = α KL(P_s[i] ‖ P_t[j]) + β CE(Y_s[i], P_t[j])`.
pub fn joint_cost_matrix(ps: &OutputBatch, ys: &LabelBatch, pt: &OutputBatch, config: &JointCostConfig) -> Result<CostMatrix> {
    config.validate()?;
    check_batches(ps, ys, pt)?;
    let mut d = Array2::zeros((ps.len(), pt.len()));
    for (i, (p, y)) in ps.samples.iter().zip(&ys.samples).enumerate() {
        for (j, q) in pt.samples.iter().enumerate() {
            let mut v = 0.0;
            if config.alpha != 0.0 {
                v += config.alpha * kl_divergence(p, q)?;
            }
            if config.beta != 0.0 {
                v += config.beta * cross_entropy(y, q)?;
            }
            d[[i, j]] = v;
        }
    }
    CostMatrix::new(d)
}

/// `⟨γ, D⟩_F`; `γ` is a constant of the loss.
pub fn ot_loss(gamma: &TransportPlan, d: &CostMatrix) -> Result<f64> {
    frobenius_inner(&gamma.coupling, d)
}

/// Gradients of [`ot_loss`] with respect to every source and target
/// probability, holding the coupling fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct OtLossGradient {
    pub source: Vec<DistGrid>,
    pub target: Vec<DistGrid>,
}

pub fn ot_loss_gradient(
    gamma: &TransportPlan,
    ps: &OutputBatch,
    ys: &LabelBatch,
    pt: &OutputBatch,
    config: &JointCostConfig,
) -> Result<OtLossGradient> {
    config.validate()?;
    check_batches(ps, ys, pt)?;
    if gamma.shape() != (ps.len(), pt.len()) {
        return Err(Error::shape(format!(
            "coupling is {:?} for a {}x{} batch pair",
            gamma.shape(),
            ps.len(),
            pt.len()
        )));
    }
    let (h, w, k) = ps.shape();
    let pixels = (h * w) as f64;
    let mut source = vec![DistGrid::zeros(h, w, k); ps.len()];
    let mut target = vec![DistGrid::zeros(h, w, k); pt.len()];

    for (i, (p, y)) in ps.samples.iter().zip(&ys.samples).enumerate() {
        let labeled = y.labeled_pixels() as f64;
        for (j, q) in pt.samples.iter().enumerate() {
            let g = gamma.coupling[[i, j]];
            if g == 0.0 {
                continue;
            }
            if config.alpha != 0.0 {
                let scale = g * config.alpha / pixels;
                let gs = &mut source[i].values;
                let gt = &mut target[j].values;
                for (idx, (&a, &b)) in p.values.iter().zip(&q.values).enumerate() {
                    let b_floor = b.max(PROB_FLOOR);
                    gs[idx] += scale * (a.max(PROB_FLOOR).ln() - b_floor.ln() + 1.0);
                    if b > PROB_FLOOR {
                        gt[idx] -= scale * a / b;
                    }
                }
            }
            if config.beta != 0.0 {
                if labeled == 0.0 {
                    return Err(Error::invalid(format!("source sample {i} has no labeled pixels")));
                }
                let scale = g * config.beta / labeled;
                let gt = &mut target[j].values;
                for (px, (&l, &ig)) in y.labels.iter().zip(&y.ignore).enumerate() {
                    let b = q.values[px * k + l];
                    if !ig && b > PROB_FLOOR {
                        gt[px * k + l] -= scale / b;
                    }
                }
            }
        }
    }
    Ok(OtLossGradient { source, target })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::DiscreteMeasure;

    fn plan(coupling: Array2<f64>) -> TransportPlan {
        let a = coupling.sum_axis(ndarray::Axis(1)).to_vec();
        let b = coupling.sum_axis(ndarray::Axis(0)).to_vec();
        TransportPlan {
            coupling,
            source_marginal: a,
            target_marginal: b,
            transport_cost: 0.0,
            iterations_used: 0,
            converged: true,
        }
    }

    fn grid(values: &[f64], classes: usize) -> DistGrid {
        DistGrid::new(1, values.len() / classes, classes, values.to_vec()).unwrap()
    }

    #[test]
    fn kl_examples() {
        let p = grid(&[1.0, 0.0], 2);
        let q = grid(&[0.5, 0.5], 2);
        assert!((kl_divergence(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
        assert!(kl_divergence(&p, &grid(&[0.5, 0.5, 0.5, 0.5], 2)).is_err());
    }

    #[test]
    fn kl_floors_zero_target() {
        let p = grid(&[0.5, 0.5], 2);
        let q = grid(&[1.0, 0.0], 2);
        let v = kl_divergence(&p, &q).unwrap();
        assert!(v.is_finite() && v > 10.0);
    }

    #[test]
    fn cross_entropy_examples() {
        let y = LabelGrid::from_classes(1, 1, 2, vec![1]).unwrap();
        assert!((cross_entropy(&y, &grid(&[0.5, 0.5], 2)).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(cross_entropy(&y, &grid(&[0.0, 1.0], 2)).unwrap(), 0.0);
        let ignored = LabelGrid::new(1, 1, 2, vec![0], vec![true]).unwrap();
        assert!(cross_entropy(&ignored, &grid(&[0.5, 0.5], 2)).is_err());
    }

    #[test]
    fn cross_entropy_skips_ignored_pixels() {
        let y = LabelGrid::new(1, 2, 2, vec![0, 1], vec![false, true]).unwrap();
        let p = grid(&[0.25, 0.75, 0.9, 0.1], 2);
        assert!((cross_entropy(&y, &p).unwrap() + 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn one_hot_round_trip_and_validation() {
        let y = LabelGrid::new(1, 3, 3, vec![2, 0, 1], vec![false, true, false]).unwrap();
        let back = LabelGrid::from_one_hot(1, 3, 3, &y.one_hot(), y.ignore_mask().to_vec()).unwrap();
        assert_eq!(back, y);
        assert!(LabelGrid::from_one_hot(1, 1, 2, &[1.0, 1.0], vec![false]).is_err());
        assert!(LabelGrid::from_classes(1, 1, 2, vec![2]).is_err());
    }

    #[test]
    fn dist_grid_validates_simplex() {
        assert!(DistGrid::new(1, 1, 2, vec![0.6, 0.6]).is_err());
        assert!(DistGrid::new(1, 1, 2, vec![1.5, -0.5]).is_err());
        assert!(DistGrid::new(1, 1, 2, vec![0.5]).is_err());
    }

    #[test]
    fn batch_rejects_mixed_shapes() {
        assert!(OutputBatch::new(vec![DistGrid::uniform(2, 2, 3), DistGrid::uniform(2, 2, 4)]).is_err());
        assert!(OutputBatch::new(vec![]).is_err());
    }

    #[test]
    fn joint_cost_kl_identity_and_ce_only() {
        let p = grid(&[0.7, 0.3, 0.2, 0.8], 2);
        let q = grid(&[0.5, 0.5, 0.1, 0.9], 2);
        let y = LabelGrid::from_classes(1, 2, 2, vec![0, 1]).unwrap();
        let ps = OutputBatch::new(vec![p.clone()]).unwrap();
        let ys = LabelBatch::new(vec![y.clone()]).unwrap();
        let pt = OutputBatch::new(vec![q.clone(), p.clone()]).unwrap();

        let d = joint_cost_matrix(&ps, &ys, &pt, &JointCostConfig::new(1.0, 0.0).unwrap()).unwrap();
        assert_eq!(d.entries()[[0, 1]], 0.0);

        let d = joint_cost_matrix(&ps, &ys, &pt, &JointCostConfig::new(0.0, 1.0).unwrap()).unwrap();
        assert_eq!(d.entries()[[0, 0]], cross_entropy(&y, &q).unwrap());
        assert_eq!(d.entries()[[0, 1]], cross_entropy(&y, &p).unwrap());
        assert!(JointCostConfig::new(0.0, 0.0).is_err());
    }

    #[test]
    fn ot_loss_examples() {
        let d = CostMatrix::new(Array2::from_elem((2, 3), 0.7)).unwrap();
        let a = DiscreteMeasure::uniform_weights(2).unwrap();
        let b = DiscreteMeasure::uniform_weights(3).unwrap();
        let outer = Array2::from_shape_fn((2, 3), |(i, j)| a.weights()[i] * b.weights()[j]);
        assert!((ot_loss(&plan(outer), &d).unwrap() - 0.7).abs() < 1e-15);

        let d = CostMatrix::new(Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64)).unwrap();
        let mut single = Array2::zeros((2, 3));
        single[[1, 2]] = 1.0;
        assert_eq!(ot_loss(&plan(single), &d).unwrap(), 5.0);
    }

    #[test]
    fn gradient_zero_for_zero_coupling() {
        let p = grid(&[0.7, 0.3], 2);
        let ps = OutputBatch::new(vec![p.clone()]).unwrap();
        let ys = LabelBatch::new(vec![LabelGrid::from_classes(1, 1, 2, vec![0]).unwrap()]).unwrap();
        let g = ot_loss_gradient(&plan(Array2::zeros((1, 1))), &ps, &ys, &ps, &JointCostConfig::default()).unwrap();
        assert!(g.source[0].values().iter().chain(g.target[0].values()).all(|v| *v == 0.0));
    }

    #[test]
    fn kl_gradient_vanishes_at_identical_pair() {
        let p = grid(&[0.7, 0.3, 0.4, 0.6], 2);
        let ps = OutputBatch::new(vec![p.clone()]).unwrap();
        let ys = LabelBatch::new(vec![LabelGrid::from_classes(1, 2, 2, vec![0, 1]).unwrap()]).unwrap();
        let g = ot_loss_gradient(
            &plan(Array2::from_elem((1, 1), 1.0)),
            &ps,
            &ys,
            &ps,
            &JointCostConfig::new(1.0, 0.0).unwrap(),
        )
        .unwrap();
        // d/dp and d/dq of Σ p log(p/q) at p == q are the constants 1 and -1
        // per class, which sum to zero along the simplex.
        for grad in [&g.source[0], &g.target[0]] {
            for px in 0..2 {
                let d = grad.pixel(px);
                assert!((d[0] - d[1]).abs() < 1e-15);
            }
        }
    }
}
