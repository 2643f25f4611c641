//! The multi-level training objective and its parameter gradient.
//!
//! [`ObjectiveForward::run`] records one forward pass over the source batch
//! and, when any OT weight is positive, the target batch. Couplings are
//! then supplied per level (they may be computed from the recorded outputs)
//! and [`ObjectiveForward::finish`] returns the loss breakdown together
//! with the gradient of the total with respect to every network parameter,
//! holding the couplings constant.

use super::loss::{mean_seg_loss, mean_seg_loss_gradient, output_batch, total_loss, MultiLevelWeights};
use super::segnet::{ForwardTrace, SegNet};
use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::jdot::{joint_cost_matrix, ot_loss, ot_loss_gradient, JointCostConfig, LabelBatch, OutputBatch};
use crate::ot::{CostMatrix, TransportPlan};

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    pub weights: MultiLevelWeights,
    pub joint: JointCostConfig,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: MultiLevelWeights::default(),
            joint: JointCostConfig::default(),
        }
    }
}

/// Per-term losses of one objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub seg: Vec<f64>,
    /// Zero for levels whose OT weight is zero (the term is not computed).
    pub ot: Vec<f64>,
    pub total: f64,
}

pub struct ObjectiveForward<'a> {
    model: &'a SegNet,
    config: &'a ObjectiveConfig,
    labels: &'a LabelBatch,
    tape: Tape,
    trace: ForwardTrace,
    n_source: usize,
    source_out: Vec<OutputBatch>,
    target_out: Option<Vec<OutputBatch>>,
}

impl<'a> ObjectiveForward<'a> {
    /// `target_images` is ignored unless some OT weight is positive.
    pub fn run(
        model: &'a SegNet,
        config: &'a ObjectiveConfig,
        source_images: &Tensor,
        source_labels: &'a LabelBatch,
        target_images: Option<&Tensor>,
    ) -> Result<Self> {
        config.weights.validate()?;
        if config.weights.levels() != super::NUM_LEVELS {
            return Err(Error::invalid(format!(
                "the network has {} levels, weights give {}",
                super::NUM_LEVELS,
                config.weights.levels()
            )));
        }
        let n_source = source_images.dims4()?.0;
        if n_source != source_labels.len() {
            return Err(Error::shape(format!(
                "{n_source} source images but {} label grids",
                source_labels.len()
            )));
        }
        let target = if config.weights.ot_active() {
            Some(target_images.ok_or_else(|| Error::invalid("OT weights are positive but no target batch was given"))?)
        } else {
            None
        };
        let input = match target {
            Some(t) => Tensor::concat(&[source_images, t])?,
            None => source_images.clone(),
        };
        let mut tape = Tape::new();
        let trace = model.forward_traced(&mut tape, &input)?;
        let mut source_out = Vec::new();
        let mut target_out = target.map(|_| Vec::new());
        for &p in &trace.probs {
            let probs = tape.value(p);
            let b = probs.shape()[0];
            source_out.push(output_batch(&probs.slice_batch(0, n_source)?)?);
            if let Some(t) = target_out.as_mut() {
                t.push(output_batch(&probs.slice_batch(n_source, b)?)?);
            }
        }
        Ok(Self {
            model,
            config,
            labels: source_labels,
            tape,
            trace,
            n_source,
            source_out,
            target_out,
        })
    }

    pub fn source_outputs(&self, level: usize) -> &OutputBatch {
        &self.source_out[level]
    }

    pub fn target_outputs(&self, level: usize) -> Option<&OutputBatch> {
        self.target_out.as_ref().map(|t| &t[level])
    }

    /// Joint cost `D_G` between this pass's source and target outputs.
    pub fn joint_cost(&self, level: usize) -> Result<CostMatrix> {
        let target = self
            .target_outputs(level)
            .ok_or_else(|| Error::invalid("no target outputs were computed"))?;
        joint_cost_matrix(&self.source_out[level], self.labels, target, &self.config.joint)
    }

    /// Losses and parameter gradients. `couplings[level]` is required for
    /// every level with a positive OT weight and ignored otherwise.
    pub fn finish(self, couplings: &[Option<&TransportPlan>]) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let weights = &self.config.weights;
        let levels = weights.levels();
        let mut seg = vec![0.0; levels];
        let mut ot = vec![0.0; levels];
        let mut seeds = Vec::with_capacity(levels);

        for level in 0..levels {
            let probs_var = self.trace.probs[level];
            let shape = self.tape.value(probs_var).shape().to_vec();
            let per_sample: usize = shape[1..].iter().product();
            let mut seed = vec![0.0; self.tape.value(probs_var).len()];

            let src = &self.source_out[level];
            seg[level] = mean_seg_loss(src, self.labels)?;
            let w_seg = weights.seg_weights[level];
            if w_seg != 0.0 {
                for (n, g) in mean_seg_loss_gradient(src, self.labels)?.iter().enumerate() {
                    for (s, v) in seed[n * per_sample..(n + 1) * per_sample].iter_mut().zip(g.values()) {
                        *s += w_seg * v;
                    }
                }
            }

            let w_ot = weights.ot_weights[level];
            if w_ot != 0.0 {
                let gamma = couplings
                    .get(level)
                    .copied()
                    .flatten()
                    .ok_or_else(|| Error::invalid(format!("no coupling supplied for level {level}")))?;
                let tgt = self.target_outputs(level).expect("targets are forwarded when OT is active");
                let d = joint_cost_matrix(src, self.labels, tgt, &self.config.joint)?;
                ot[level] = ot_loss(gamma, &d)?;
                let grad = ot_loss_gradient(gamma, src, self.labels, tgt, &self.config.joint)?;
                let offsets = (0..src.len()).chain(self.n_source..self.n_source + tgt.len());
                for (n, g) in offsets.zip(grad.source.iter().chain(&grad.target)) {
                    for (s, v) in seed[n * per_sample..(n + 1) * per_sample].iter_mut().zip(g.values()) {
                        *s += w_ot * v;
                    }
                }
            }
            seeds.push((probs_var, Tensor::new(shape, seed)?));
        }

        let total = total_loss(&seg, &ot, weights)?;
        if !total.is_finite() {
            return Err(Error::Numerical(format!("objective is not finite (seg {seg:?}, ot {ot:?})")));
        }
        let seed_refs: Vec<_> = seeds.iter().map(|(v, t)| (*v, t)).collect();
        let mut grads = self.tape.backward(&seed_refs)?;
        let param_grads = self
            .trace
            .params
            .iter()
            .zip(self.model.params())
            .map(|(&v, p)| grads.take_or_zeros(v, p.shape()))
            .collect();
        Ok((LossBreakdown { seg, ot, total }, param_grads))
    }
}
