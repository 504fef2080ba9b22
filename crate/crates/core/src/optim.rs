//! AdamW with decoupled weight decay, plus the cosine learning-rate
//! schedule used for training runs.

use crate::param::Param;
use crate::tensor::{Gradients, Tensor};

pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &[&Param], weight_decay: f32) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. `params` must be the same slice (in
    /// the same order) the optimizer was built with.
    pub fn step(&mut self, params: &[&Param], grads: &Gradients, lr: f32) {
        assert_eq!(params.len(), self.m.len(), "optimizer/param mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter().enumerate() {
            let g = p.grad(grads);
            let mut value = p.value().data().to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..value.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                value[j] -=
                    lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * value[j]);
            }
            p.set_value(Tensor::new(&p.shape(), value).expect("adamw keeps shapes"));
        }
    }

    /// Optimizer state as named tensors for checkpointing.
    pub fn state_tensors(&self, params: &[&Param]) -> Vec<(String, Tensor)> {
        let mut out = vec![(
            "adam.step".to_string(),
            Tensor::scalar(self.step as f32),
        )];
        for (i, p) in params.iter().enumerate() {
            out.push((
                format!("adam.m.{}", p.name()),
                Tensor::new(&p.shape(), self.m[i].clone()).expect("adam m shape"),
            ));
            out.push((
                format!("adam.v.{}", p.name()),
                Tensor::new(&p.shape(), self.v[i].clone()).expect("adam v shape"),
            ));
        }
        out
    }

    /// Restore state saved by [`AdamW::state_tensors`]; silently keeps
    /// zeros for parameters without saved state.
    pub fn load_state(&mut self, params: &[&Param], get: impl Fn(&str) -> Option<Tensor>) {
        if let Some(step) = get("adam.step") {
            self.step = step.scalar_value() as u64;
        }
        for (i, p) in params.iter().enumerate() {
            if let Some(m) = get(&format!("adam.m.{}", p.name())) {
                self.m[i].copy_from_slice(m.data());
            }
            if let Some(v) = get(&format!("adam.v.{}", p.name())) {
                self.v[i].copy_from_slice(v.data());
            }
        }
    }
}

/// Cosine decay from `base_lr` to `min_lr` over `total` epochs, with a
/// linear warmup over the first `warmup` epochs.
pub fn cosine_lr(epoch: usize, total: usize, warmup: usize, base_lr: f32, min_lr: f32) -> f32 {
    if total == 0 {
        return base_lr;
    }
    if epoch < warmup {
        return base_lr * (epoch + 1) as f32 / warmup.max(1) as f32;
    }
    let span = (total.saturating_sub(warmup)).max(1) as f32;
    let t = (epoch - warmup) as f32 / span;
    let cos = 0.5 * (1.0 + (std::f32::consts::PI * t.min(1.0)).cos());
    min_lr + (base_lr - min_lr) * cos
}
