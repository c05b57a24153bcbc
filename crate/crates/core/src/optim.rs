//! SGD with momentum and coupled weight decay, its Batch-Manhattan variant
//! and the step-decay learning-rate schedule.
//!
//! Both optimizers maintain `v ← μ·v + (g + λ_wd·θ)`. SGD steps along `v`;
//! Batch-Manhattan steps by a fixed `lr` along `sign(v)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Param;
use crate::tensor::{sign, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[default]
    #[serde(rename = "sgd")]
    Sgd,
    #[serde(rename = "bm")]
    BatchManhattan,
}

fn default_decay_every() -> usize {
    10
}

fn default_decay_factor() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Epochs between learning-rate drops.
    #[serde(default = "default_decay_every")]
    pub decay_every: usize,
    /// Divisor applied at each drop.
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            momentum,
            weight_decay,
            decay_every: default_decay_every(),
            decay_factor: default_decay_factor(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be positive".into()));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor >= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must be at least 1, got {}",
                self.decay_factor
            )));
        }
        Ok(())
    }

    /// Learning rate for a zero-based training epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_decay(self.lr, epoch, self.decay_every, self.decay_factor)
    }
}

fn step_decay(lr0: f64, epoch: usize, every: usize, factor: f64) -> f64 {
    let drops = (epoch / every) as i32;
    lr0 / factor.powi(drops)
}

/// `lr0 · 10^-floor(epoch / 10)`.
pub fn lr_at_epoch(lr0: f64, epoch: usize) -> f64 {
    step_decay(lr0, epoch, 10, 10.0)
}

fn check_step_inputs(param: &Tensor, grad: &Tensor, velocity: &Tensor) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::dim("optimizer step", param.shape(), grad.shape()));
    }
    if param.shape() != velocity.shape() {
        return Err(Error::dim("optimizer step", param.shape(), velocity.shape()));
    }
    grad.check_finite("gradient")
}

fn accumulate(param: &Tensor, grad: &Tensor, velocity: &mut Tensor, momentum: f64, weight_decay: f64) {
    for ((v, &g), &p) in velocity.data_mut().iter_mut().zip(grad.data()).zip(param.data()) {
        *v = momentum * *v + (g + weight_decay * p);
    }
}

/// One SGD step: `g ← grad + wd·θ; v ← μ·v + g; θ ← θ − lr·v`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_step_inputs(param, grad, velocity)?;
    accumulate(param, grad, velocity, momentum, weight_decay);
    for (p, &v) in param.data_mut().iter_mut().zip(velocity.data()) {
        *p -= lr * v;
    }
    param.check_finite("sgd step")
}

/// Velocity update followed by the Batch-Manhattan step vector
/// `lr · sign(v)` (with `sign(0) = 0`). Every entry is exactly `-lr`, `0`
/// or `lr`.
pub fn bm_update(
    param: &Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<Tensor> {
    check_step_inputs(param, grad, velocity)?;
    accumulate(param, grad, velocity, momentum, weight_decay);
    velocity.map(|v| lr * sign(v))
}

/// One Batch-Manhattan step: same velocity as SGD, then
/// `θ ← θ − lr·sign(v)`.
pub fn bm_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let step = bm_update(param, grad, velocity, lr, momentum, weight_decay)?;
    for (p, &d) in param.data_mut().iter_mut().zip(step.data()) {
        *p -= d;
    }
    param.check_finite("bm step")
}

/// Optimizer state for one network: one velocity buffer per parameter,
/// created lazily on the first step.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    velocity: Vec<Tensor>,
    epoch: usize,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            velocity: Vec::new(),
            epoch: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_at(self.epoch)
    }

    /// Updates every parameter in place from its gradient. A non-finite
    /// gradient aborts with the offending parameter named.
    pub fn step(&mut self, params: Vec<Param<'_>>) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let lr = self.lr();
        let OptimizerConfig {
            kind,
            momentum,
            weight_decay,
            ..
        } = self.config;
        for (p, v) in params.into_iter().zip(&mut self.velocity) {
            let step = match kind {
                OptimizerKind::Sgd => sgd_step,
                OptimizerKind::BatchManhattan => bm_step,
            };
            step(p.value, p.grad, v, lr, momentum, weight_decay).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("{}: {msg}", p.label)),
                other => other,
            })?;
        }
        Ok(())
    }
}
