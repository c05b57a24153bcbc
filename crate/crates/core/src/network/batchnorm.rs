//! Per-channel batch normalization over `[N, C]` or `[N, C, H, W]` inputs.
//!
//! The backward pass is always the exact derivative; feedback rules never
//! apply here.

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct BatchNorm {
    channels: usize,
    eps: f64,
    momentum: f64,
    gamma: Tensor,
    beta: Tensor,
    grad_gamma: Tensor,
    grad_beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    cache: Option<Cache>,
}

#[derive(Clone, Debug)]
struct Cache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    mode: Mode,
}

/// `(N, C, spatial)` view of a supported input shape.
fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::Config(format!(
            "batchnorm expects [N, C] or [N, C, H, W], got {shape:?}"
        ))),
    }
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm::with_params(channels, DEFAULT_EPS, DEFAULT_MOMENTUM)
    }

    pub fn with_params(channels: usize, eps: f64, momentum: f64) -> Self {
        BatchNorm {
            channels,
            eps,
            momentum,
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            grad_gamma: Tensor::zeros(&[channels]),
            grad_beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn gamma(&self) -> &Tensor {
        &self.gamma
    }

    pub fn beta(&self) -> &Tensor {
        &self.beta
    }

    pub fn grad_gamma(&self) -> &Tensor {
        &self.grad_gamma
    }

    pub fn grad_beta(&self) -> &Tensor {
        &self.grad_beta
    }

    pub fn running_mean(&self) -> &Tensor {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Tensor {
        &self.running_var
    }

    pub(crate) fn params_mut(&mut self) -> [(&'static str, &mut Tensor, &Tensor); 2] {
        [
            ("gamma", &mut self.gamma, &self.grad_gamma),
            ("beta", &mut self.beta, &self.grad_beta),
        ]
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, area) = layout(x.shape())?;
        if c != self.channels {
            return Err(Error::dim("batchnorm forward", x.shape(), &[self.channels]));
        }
        let count = n * area;
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::Config(
                        "batchnorm needs a batch of at least 2 in training mode".into(),
                    ));
                }
                let mut mean = vec![0.0; c];
                for (i, v) in x.data().iter().enumerate() {
                    mean[(i / area) % c] += v;
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                let mut var = vec![0.0; c];
                for (i, v) in x.data().iter().enumerate() {
                    let ch = (i / area) % c;
                    var[ch] += (v - mean[ch]).powi(2);
                }
                var.iter_mut().for_each(|s| *s /= count as f64);

                let m = self.momentum;
                let unbias = count as f64 / (count as f64 - 1.0);
                let rm = self.running_mean.data_mut();
                for (r, &mu) in rm.iter_mut().zip(&mean) {
                    *r = (1.0 - m) * *r + m * mu;
                }
                let rv = self.running_var.data_mut();
                for (r, &s) in rv.iter_mut().zip(&var) {
                    *r = (1.0 - m) * *r + m * s * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let (g, b) = (self.gamma.data(), self.beta.data());
        let mut x_hat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for (i, v) in x.data().iter().enumerate() {
            let ch = (i / area) % c;
            let xh = (v - mean[ch]) * inv_std[ch];
            x_hat.push(xh);
            out.push(g[ch] * xh + b[ch]);
        }
        self.cache = Some(Cache {
            x_hat: Tensor::new(x.shape().to_vec(), x_hat)?,
            inv_std,
            mode,
        });
        Tensor::new(x.shape().to_vec(), out)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("batchnorm backward without forward".into()))?;
        if grad.shape() != cache.x_hat.shape() {
            return Err(Error::dim("batchnorm backward", grad.shape(), cache.x_hat.shape()));
        }
        let (n, c, area) = layout(grad.shape())?;
        let count = (n * area) as f64;
        let xh = cache.x_hat.data();
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xh = vec![0.0; c];
        for (i, (&dy, &x)) in grad.data().iter().zip(xh).enumerate() {
            let ch = (i / area) % c;
            sum_dy[ch] += dy;
            sum_dy_xh[ch] += dy * x;
        }
        let g = self.gamma.data();
        let dx: Vec<f64> = match cache.mode {
            Mode::Train => grad
                .data()
                .iter()
                .zip(xh)
                .enumerate()
                .map(|(i, (&dy, &x))| {
                    let ch = (i / area) % c;
                    g[ch] * cache.inv_std[ch] / count * (count * dy - sum_dy[ch] - x * sum_dy_xh[ch])
                })
                .collect(),
            Mode::Eval => grad
                .data()
                .iter()
                .enumerate()
                .map(|(i, &dy)| {
                    let ch = (i / area) % c;
                    g[ch] * cache.inv_std[ch] * dy
                })
                .collect(),
        };
        self.grad_gamma = Tensor::new(vec![c], sum_dy_xh)?;
        self.grad_beta = Tensor::new(vec![c], sum_dy)?;
        Tensor::new(grad.shape().to_vec(), dx)
    }
}
