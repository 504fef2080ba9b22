//! Batch normalization over `[N, C, H, W]`.
//!
//! The model folds timesteps into the batch axis before calling this, so
//! statistics are taken over T*B*H*W per channel. Training mode normalizes
//! with batch statistics and updates the running estimates; eval mode uses
//! the running estimates.

use std::cell::{Cell, RefCell};

use super::tape::Tape;
use super::Tensor;
use crate::error::{Error, Result};
use crate::param::Param;
use crate::shape_err;

pub struct BatchNormParams {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: RefCell<Vec<f32>>,
    pub running_var: RefCell<Vec<f32>>,
    pub eps: f32,
    pub momentum: f32,
    pub training: Cell<bool>,
}

impl BatchNormParams {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: RefCell::new(vec![0.0; channels]),
            running_var: RefCell::new(vec![1.0; channels]),
            eps: 1e-5,
            momentum: 0.1,
            training: Cell::new(true),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

impl Tape {
    pub fn batchnorm(&self, x: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
        if x.rank() != 4 {
            return Err(shape_err!("batchnorm: input must be [N,C,H,W], got {:?}", x.shape()));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if c != p.channels() {
            return Err(shape_err!(
                "batchnorm: {c} channels vs {} parameters",
                p.channels()
            ));
        }
        let m = n * h * w; // samples per channel
        let plane = h * w;
        let gamma = p.gamma.taped(self);
        let beta = p.beta.taped(self);

        let (mean, var): (Vec<f32>, Vec<f32>) = if p.training.get() {
            if m == 1 {
                return Err(Error::Contract(
                    "batchnorm: variance undefined for a single sample per channel in training mode"
                        .into(),
                ));
            }
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    for &v in &x.data()[base..base + plane] {
                        mean[ci] += v as f64;
                    }
                }
            }
            for v in &mut mean {
                *v /= m as f64;
            }
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    for &v in &x.data()[base..base + plane] {
                        let d = v as f64 - mean[ci];
                        var[ci] += d * d;
                    }
                }
            }
            for v in &mut var {
                *v /= m as f64; // biased variance, consistent with normalization
            }
            {
                let mut rm = p.running_mean.borrow_mut();
                let mut rv = p.running_var.borrow_mut();
                let mom = p.momentum as f64;
                for ci in 0..c {
                    rm[ci] = ((1.0 - mom) * rm[ci] as f64 + mom * mean[ci]) as f32;
                    rv[ci] = ((1.0 - mom) * rv[ci] as f64 + mom * var[ci]) as f32;
                }
            }
            (
                mean.iter().map(|&v| v as f32).collect(),
                var.iter().map(|&v| v as f32).collect(),
            )
        } else {
            (p.running_mean.borrow().clone(), p.running_var.borrow().clone())
        };

        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + p.eps).sqrt()).collect();
        let mut xhat = vec![0.0f32; x.len()];
        let mut out = vec![0.0f32; x.len()];
        let (gd, bd) = (gamma.data(), beta.data());
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let (mu, is, ga, be) = (mean[ci], inv_std[ci], gd[ci], bd[ci]);
                for j in base..base + plane {
                    let xh = (x.data()[j] - mu) * is;
                    xhat[j] = xh;
                    out[j] = ga * xh + be;
                }
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        let xhat = Tensor::new(x.shape(), xhat)?;

        let training = p.training.get();
        let (xn, gn, bn) = (x.node, gamma.node, beta.node);
        let gamma_saved = gamma.clone();
        Ok(self.record("batchnorm", &[xn, gn, bn], out, move |g, sink| {
            let gd = g.data();
            // Per-channel reductions shared by all three gradients.
            let mut sum_g = vec![0.0f64; c];
            let mut sum_g_xhat = vec![0.0f64; c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    for j in base..base + plane {
                        sum_g[ci] += gd[j] as f64;
                        sum_g_xhat[ci] += gd[j] as f64 * xhat.data()[j] as f64;
                    }
                }
            }
            if gn.is_some() {
                let data: Vec<f32> = sum_g_xhat.iter().map(|&v| v as f32).collect();
                sink.add(gn, Tensor::new(&[c], data).expect("bn dgamma"));
            }
            if bn.is_some() {
                let data: Vec<f32> = sum_g.iter().map(|&v| v as f32).collect();
                sink.add(bn, Tensor::new(&[c], data).expect("bn dbeta"));
            }
            if xn.is_some() {
                let mut gx = vec![0.0f32; xhat.len()];
                if training {
                    // dx = (gamma/std) * (g - mean(g) - xhat * mean(g*xhat))
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let scale = gamma_saved.data()[ci] * inv_std[ci];
                            let mg = (sum_g[ci] / m as f64) as f32;
                            let mgx = (sum_g_xhat[ci] / m as f64) as f32;
                            for j in base..base + plane {
                                gx[j] = scale * (gd[j] - mg - xhat.data()[j] * mgx);
                            }
                        }
                    }
                } else {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let scale = gamma_saved.data()[ci] * inv_std[ci];
                            for j in base..base + plane {
                                gx[j] = scale * gd[j];
                            }
                        }
                    }
                }
                sink.add(xn, Tensor::new(xhat.shape(), gx).expect("bn dx"));
            }
        }))
    }
}
