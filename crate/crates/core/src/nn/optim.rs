use super::segnet::SegNet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// SGD with Nesterov momentum, weight decay and polynomial learning-rate decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub max_iterations: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 2.5e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            max_iterations: 60_000,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.base_lr > 0.0 && self.base_lr.is_finite())
            || !finite_nonneg(self.momentum)
            || !finite_nonneg(self.weight_decay)
            || !(self.poly_power > 0.0)
            || self.max_iterations == 0
        {
            return Err(Error::invalid(format!("invalid optimizer configuration {self:?}")));
        }
        Ok(())
    }

    /// `base_lr · (1 − iteration / max_iterations)^poly_power`.
    pub fn learning_rate(&self, iteration: usize) -> Result<f64> {
        if iteration >= self.max_iterations {
            return Err(Error::invalid(format!(
                "iteration {iteration} is past the schedule end {}",
                self.max_iterations
            )));
        }
        let progress = iteration as f64 / self.max_iterations as f64;
        Ok(self.base_lr * (1.0 - progress).powf(self.poly_power))
    }
}

/// Optimizer state: one velocity buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct Sgd {
    config: OptimConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    /// Applies one update and returns the learning rate used.
    ///
    /// With decayed gradient `d = g + wd·p`: `v ← μv + d`, `p ← p − lr·(d + μv)`.
    pub fn step(&mut self, model: &mut SegNet, grads: &[Tensor], iteration: usize) -> Result<f64> {
        let lr = self.config.learning_rate(iteration)?;
        let params = model.params_mut();
        if grads.len() != params.len() || grads.iter().zip(params.iter()).any(|(g, p)| g.shape() != p.shape()) {
            return Err(Error::shape("gradients do not match the model parameters"));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = if wd != 0.0 { gv + wd * *pv } else { gv };
                if mu != 0.0 {
                    *vv = mu * *vv + d;
                    *pv -= lr * (d + mu * *vv);
                } else {
                    *pv -= lr * d;
                }
            }
        }
        Ok(lr)
    }
}
